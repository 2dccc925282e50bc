"""Sample paths of the damped/forced stochastic wave equation.

    dy_t - Lap y dt = (a1 y_t + <a2, grad y> + a3 y + f) dt + (a4 y + g) dw(t),
    y = 0 on the boundary,  y(0) = y0,  y_t(0) = y1,

with one scalar Brownian motion shared across space.

The scheme is the explicit velocity/position (symplectic Euler) update

    z^{n+1} = z^n + dt (Lap_h y^n + a1 z^n + a2 . grad_h y^n + a3 y^n + f^n)
              + (a4 y^n + g^n) dW^n
    y^{n+1} = y^n + dt z^{n+1}

with the noise sampled at the left end of each step (Ito).  The internal
velocity z^n lives at the half step t_n - dt/2; it is started as
z^0 = y1 - dt/2 * acc^0 so that the scheme is second-order accurate, and the
velocity reported at the grid times is z^n + dt/2 * acc^n (adapted: it uses
no future increments).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import CFLError, NonFiniteError, ValidationError
from .geometry import Boundary, DomainSpec

DEFAULT_CFL = 0.9


# -- noise -------------------------------------------------------------------

def _generator(seed: int, path_index: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(path_index), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


def generate_brownian(num_steps: int, seed: int, path_index: int = 0, dt: float = 1.0,
                      stream: int = 0) -> np.ndarray:
    """Brownian increments N(0, dt) for one path.

    Philox is a counter-based generator keyed by (seed, path_index, stream):
    the value at a given step never depends on how many steps or which other
    paths are drawn.
    """
    if num_steps < 1:
        raise ValidationError(f"num_steps={num_steps}: need at least one step")
    return math.sqrt(dt) * _generator(seed, path_index, stream).standard_normal(num_steps)


def standard_normals(num: int, seed: int, path_index: int, stream: int) -> np.ndarray:
    return _generator(seed, path_index, stream).standard_normal(num)


# -- grids and data ----------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    domain: DomainSpec
    T: float
    nt: int

    def __post_init__(self):
        if self.nt < 1:
            raise ValidationError(f"nt={self.nt}: need at least one time step")
        if not self.T > 0:
            raise ValidationError(f"T={self.T}: must be positive")

    @classmethod
    def from_cfl(cls, domain: DomainSpec, T: float, cfl: float = DEFAULT_CFL):
        bound = cfl * domain.h / math.sqrt(domain.n)
        return cls(domain, T, max(1, math.ceil(T / bound - 1e-9)))

    @classmethod
    def from_dt(cls, domain: DomainSpec, T: float, dt: float):
        nt = int(round(T / dt))
        if abs(nt * dt - T) > 1e-9 * T:
            raise ValidationError(f"dt={dt} does not divide T={T}")
        return cls(domain, T, nt)

    @property
    def h(self) -> float:
        return self.domain.h

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.nt + 1)

    @property
    def shape(self):
        return self.domain.grid_shape()

    def time_weights(self) -> np.ndarray:
        w = np.full(self.nt + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    def check_cfl(self, safety: float = DEFAULT_CFL):
        bound = safety * self.h / math.sqrt(self.domain.n)
        if self.dt > bound * (1 + 1e-12):
            raise CFLError(
                f"dt={self.dt!r} exceeds the CFL bound {safety} h / sqrt(n) = {bound!r} (h={self.h})"
            )


@dataclass(frozen=True)
class PerPathGrid:
    """Precomputed adapted coefficient: values[path_index, time_index, *space]."""

    values: np.ndarray


Coefficient = Union[float, Callable, np.ndarray, PerPathGrid]


def _interior_mask(shape):
    m = np.zeros(shape, dtype=bool)
    m[tuple(slice(1, -1) for _ in shape)] = True
    return m


def _evaluate(coef, t_index, t, X, path_indices=None, vector=False):
    """Evaluate a coefficient at one time level; result broadcasts against (P, *space)."""
    if isinstance(coef, PerPathGrid):
        return coef.values[np.asarray(path_indices), t_index]
    if callable(coef):
        return np.asarray(coef(t, X), dtype=float)
    arr = np.asarray(coef, dtype=float)
    space = X.shape[:-1]
    ndim_space = len(space) + (1 if vector else 0)
    if arr.ndim > ndim_space:
        return arr[t_index]
    return arr


@dataclass
class CoefficientSet:
    a1: Coefficient = 0.0
    a2: Coefficient = 0.0
    a3: Coefficient = 0.0
    a4: Coefficient = 0.0
    f: Coefficient = 0.0
    g: Coefficient = 0.0

    def at(self, name, t_index, t, X, path_indices=None):
        vec = name == "a2"
        val = _evaluate(getattr(self, name), t_index, t, X, path_indices, vector=vec)
        if vec and val.ndim == 0:
            val = np.full(X.shape[-1], float(val))
        return val

    def is_zero(self, name) -> bool:
        v = getattr(self, name)
        return not callable(v) and not isinstance(v, PerPathGrid) and not np.any(np.asarray(v))

    def sample(self, name, grid: Grid, path_index=None) -> np.ndarray:
        """Values on the full space-time grid, shape (nt+1, *space[, n])."""
        X = grid.domain.points()
        space = X.shape[:-1]
        out = []
        for i, t in enumerate(grid.times):
            v = self.at(name, i, t, X, None if path_index is None else [path_index])
            if path_index is not None and isinstance(getattr(self, name), PerPathGrid):
                v = v[0]
            tail = space + ((X.shape[-1],) if name == "a2" else ())
            out.append(np.broadcast_to(v, tail))
        return np.array(out)


@dataclass
class InitialData:
    y0: Union[np.ndarray, Callable]
    y1: Union[np.ndarray, Callable] = 0.0

    def evaluate(self, domain: DomainSpec):
        X = domain.points()
        space = X.shape[:-1]
        vals = []
        for name, v in (("y0", self.y0), ("y1", self.y1)):
            a = np.asarray(v(X) if callable(v) else v, dtype=float)
            vals.append(np.array(np.broadcast_to(a, space), dtype=float))
        y0, y1 = vals
        edge = ~_interior_mask(space)
        scale = max(1.0, float(np.abs(y0).max(initial=0.0)))
        if np.abs(y0[edge]).max(initial=0.0) > 1e-10 * scale:
            raise ValidationError("y0 must vanish on the boundary (Dirichlet condition)")
        y0[edge] = 0.0
        y1[edge] = 0.0
        return y0, y1


@dataclass
class SolutionPath:
    y: np.ndarray
    z: np.ndarray
    dW: np.ndarray
    seed: int
    path_index: int
    grid: Grid = field(repr=False)


@dataclass
class PathBatch:
    """Several paths stacked along a leading axis."""

    y: np.ndarray
    z: np.ndarray
    dW: np.ndarray
    seed: int
    path_indices: np.ndarray
    grid: Grid = field(repr=False)

    def __len__(self):
        return len(self.path_indices)

    def path(self, i) -> SolutionPath:
        return SolutionPath(self.y[i], self.z[i], self.dW[i], self.seed,
                            int(self.path_indices[i]), self.grid)

    @classmethod
    def from_path(cls, p: SolutionPath):
        return cls(p.y[None], p.z[None], p.dW[None], p.seed, np.array([p.path_index]), p.grid)


# -- difference operators (space axes are the trailing n axes) ----------------

def laplacian(y, h, n):
    out = np.zeros_like(y)
    inner = (Ellipsis,) + tuple(slice(1, -1) for _ in range(n))
    acc = 0.0
    for ax in range(n):
        lo = list(inner)
        hi = list(inner)
        lo[1 + ax] = slice(0, -2)
        hi[1 + ax] = slice(2, None)
        acc = acc + (y[tuple(lo)] - 2 * y[inner] + y[tuple(hi)])
    out[inner] = acc / h**2
    return out


def centered_gradient(y, h, n):
    """Centered differences at interior nodes, zero on the boundary; trailing axis = component."""
    out = np.zeros(y.shape + (n,))
    inner = (Ellipsis,) + tuple(slice(1, -1) for _ in range(n))
    for ax in range(n):
        lo = list(inner)
        hi = list(inner)
        lo[1 + ax] = slice(0, -2)
        hi[1 + ax] = slice(2, None)
        out[inner + (ax,)] = (y[tuple(hi)] - y[tuple(lo)]) / (2 * h)
    return out


def full_gradient(y, h, n):
    """Second-order gradient on every node (one-sided at the boundary)."""
    nd = y.ndim
    comps = [np.gradient(y, h, axis=nd - n + ax, edge_order=2) for ax in range(n)]
    return np.stack(comps, axis=-1)


# -- time stepping -----------------------------------------------------------

def _acceleration(coeffs, y, zs, t_index, t, X, h, n, interior, path_indices, skip):
    acc = laplacian(y, h, n)
    if not skip["a1"]:
        acc = acc + coeffs.at("a1", t_index, t, X, path_indices) * zs
    if not skip["a2"]:
        a2 = coeffs.at("a2", t_index, t, X, path_indices)
        acc = acc + np.einsum("...i,...i->...", np.broadcast_to(a2, y.shape + (n,)),
                              centered_gradient(y, h, n))
    if not skip["a3"]:
        acc = acc + coeffs.at("a3", t_index, t, X, path_indices) * y
    if not skip["f"]:
        acc = acc + coeffs.at("f", t_index, t, X, path_indices)
    return np.where(interior, acc, 0.0)


def simulate_batch(coeffs: CoefficientSet, init: InitialData, grid: Grid, seed: int,
                   path_indices: Sequence[int], noise: bool = True,
                   cfl_safety: float = DEFAULT_CFL) -> PathBatch:
    grid.check_cfl(cfl_safety)
    dom = grid.domain
    n, h, dt, nt = dom.n, grid.h, grid.dt, grid.nt
    X = dom.points()
    space = X.shape[:-1]
    interior = _interior_mask(space)
    idx = np.asarray(list(path_indices), dtype=np.int64)
    P = len(idx)
    dW = np.stack([generate_brownian(nt, seed, int(i), dt) for i in idx]) if P else np.zeros((0, nt))
    if not noise:
        dW = np.zeros_like(dW)
    skip = {k: coeffs.is_zero(k) for k in ("a1", "a2", "a3", "a4", "f", "g")}
    noisy = noise and not (skip["a4"] and skip["g"])

    y0, y1 = init.evaluate(dom)
    y = np.broadcast_to(y0, (P,) + space).copy()
    v1 = np.broadcast_to(y1, (P,) + space).copy()
    # start the half-step velocity so that the reported velocity at t=0 is y1
    acc_rest = _acceleration(coeffs, y, np.zeros_like(y), 0, 0.0, X, h, n, interior, idx,
                             dict(skip, a1=True))
    if skip["a1"]:
        zs = v1 - 0.5 * dt * acc_rest
    else:
        a1 = coeffs.at("a1", 0, 0.0, X, idx)
        zs = (v1 - 0.5 * dt * acc_rest) / (1 + 0.5 * dt * a1)
    zs = np.where(interior, zs, 0.0)

    Y = np.empty((P, nt + 1) + space)
    Z = np.empty((P, nt + 1) + space)
    times = grid.times
    for step in range(nt + 1):
        t = times[step]
        acc = _acceleration(coeffs, y, zs, step, t, X, h, n, interior, idx, skip)
        Y[:, step] = y
        Z[:, step] = zs + 0.5 * dt * acc
        if step == nt:
            break
        zs = zs + dt * acc
        if noisy:
            sig = 0.0
            if not skip["a4"]:
                sig = coeffs.at("a4", step, t, X, idx) * y
            if not skip["g"]:
                sig = sig + coeffs.at("g", step, t, X, idx)
            inc = dW[:, step].reshape((P,) + (1,) * n)
            zs = zs + np.where(interior, sig, 0.0) * inc
        y = y + dt * zs
        if not np.isfinite(y).all():
            raise NonFiniteError(f"non-finite solution values at time step {step + 1}", step + 1)
    return PathBatch(Y, Z, dW, int(seed), idx, grid)


def simulate(coeffs: CoefficientSet, init: InitialData, grid: Grid, path_seed: int,
             path_index: int = 0, noise: bool = True) -> SolutionPath:
    return simulate_batch(coeffs, init, grid, path_seed, [path_index], noise=noise).path(0)


def batch_size_for(grid: Grid, budget_bytes: float = 2.0e8) -> int:
    per_path = 8.0 * (grid.nt + 1) * int(np.prod(grid.shape)) * 6
    return max(1, int(budget_bytes // per_path))


def iterate_batches(coeffs, init, grid, seed, num_paths, batch_size=None, noise=True,
                    first_path=0) -> Iterator[PathBatch]:
    size = batch_size or batch_size_for(grid)
    for start in range(first_path, first_path + num_paths, size):
        stop = min(start + size, first_path + num_paths)
        yield simulate_batch(coeffs, init, grid, seed, range(start, stop), noise=noise)


# -- diagnostics -------------------------------------------------------------

def _as_batch(path) -> PathBatch:
    return PathBatch.from_path(path) if isinstance(path, SolutionPath) else path


def boundary_normal_trace(path, boundary: Optional[Boundary] = None, mask=None) -> np.ndarray:
    """Outward normal derivative at the boundary nodes via the 3-point one-sided stencil.

    Returns shape (..., nt+1, m) matching the input (single path or batch).
    With ``mask`` the entries outside the mask are zero.
    """
    single = isinstance(path, SolutionPath)
    b = _as_batch(path)
    bnd = b.grid.domain.boundary() if boundary is None else boundary
    if bnd.index is None:
        raise ValidationError("boundary has no grid nodes to differentiate")
    n, h = b.grid.domain.n, b.grid.h
    y = b.y
    base = [np.asarray(i) for i in bnd.index]

    def take(offset):
        ind = []
        for ax in range(n):
            ind.append(base[ax] - offset * bnd.sign * (bnd.axis == ax))
        return y[(slice(None), slice(None)) + tuple(ind)]

    tr = (3 * take(0) - 4 * take(1) + take(2)) / (2 * h)
    if mask is not None:
        tr = np.where(np.asarray(mask, dtype=bool), tr, 0.0)
    return tr[0] if single else tr


def energy_density_integrals(y, z, domain: DomainSpec):
    """(int y_t^2, int |grad y|^2, int y^2) over the trailing space axes.

    Velocity and y^2 use the trapezoid rule; the gradient uses forward
    differences on cell edges, which makes the discrete energy the one the
    scheme conserves.
    """
    n, h = domain.n, domain.h
    w = domain.quadrature_weights()
    axes = tuple(range(-n, 0))
    kin = np.sum(w * z**2, axis=axes)
    mass = np.sum(w * y**2, axis=axes)
    grad = 0.0
    for ax in range(n):
        d = np.diff(y, axis=y.ndim - n + ax) / h
        we = np.ones(d.shape[-n:]) * h**n
        for other in range(n):
            if other == ax:
                continue
            sl = [slice(None)] * n
            sl[other] = 0
            we[tuple(sl)] *= 0.5
            sl[other] = -1
            we[tuple(sl)] *= 0.5
        grad = grad + np.sum(we * d**2, axis=axes)
    return kin, grad, mass


def energy(path, t=None) -> Union[float, np.ndarray]:
    """E(t) = 1/2 int (y_t^2 + |grad y|^2); all grid times when ``t`` is None."""
    single = isinstance(path, SolutionPath)
    b = _as_batch(path)
    kin, grad, _ = energy_density_integrals(b.y, b.z, b.grid.domain)
    E = 0.5 * (kin + grad)
    if single:
        E = E[0]
    if t is None:
        return E
    i = int(round(t / b.grid.dt))
    if abs(i * b.grid.dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= i <= b.grid.nt:
        raise ValidationError(f"t={t} is not on the time grid")
    return E[..., i]


@dataclass
class NormBundle:
    a1: float
    a2: float
    a3: float
    a4: float
    f: float
    g: float
    n: int

    @property
    def a1a4(self) -> float:
        return math.hypot(self.a1, self.a4)

    @property
    def exponent(self) -> float:
        """|(a1, a4)|^2 + |a2|^2 + |a3|^2 with the norms above."""
        return self.a1a4**2 + self.a2**2 + self.a3**2

    def as_dict(self):
        return {"a1": self.a1, "a2": self.a2, "a3": self.a3, "a4": self.a4,
                "a1a4": self.a1a4, "f_L2": self.f, "g_L2": self.g,
                "exponent": self.exponent}


def coefficient_norms(coeffs: CoefficientSet, grid: Grid, path_index=None) -> NormBundle:
    """Discrete sup norms of a1, a2, a4; sup_t ||a3(t)||_{L^n}; L^2(Q) norms of f, g."""
    dom = grid.domain
    n = dom.n
    w = dom.quadrature_weights()
    axes = tuple(range(-n, 0))

    def sup(name):
        if coeffs.is_zero(name):
            return 0.0
        return float(np.abs(coeffs.sample(name, grid, path_index)).max())

    if coeffs.is_zero("a2"):
        a2 = 0.0
    else:
        a2 = float(np.linalg.norm(coeffs.sample("a2", grid, path_index), axis=-1).max())
    if coeffs.is_zero("a3"):
        a3 = 0.0
    else:
        v = np.abs(coeffs.sample("a3", grid, path_index))
        a3 = float((np.sum(w * v**n, axis=axes) ** (1.0 / n)).max())

    def l2(name):
        if coeffs.is_zero(name):
            return 0.0
        v = coeffs.sample(name, grid, path_index)
        return float(math.sqrt(np.sum(grid.time_weights() * np.sum(w * v**2, axis=axes))))

    return NormBundle(sup("a1"), a2, a3, sup("a4"), l2("f"), l2("g"), n)


# -- binary dumps ------------------------------------------------------------

MAGIC = b"CWLPATH1"


def dump_path(path: SolutionPath, fh) -> None:
    """Write ``MAGIC | uint32 header length | JSON header | row-major <f8 arrays``."""
    arrays = {"y": path.y, "z": path.z, "dW": path.dW}
    header = {
        "dtype": "<f8",
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "seed": path.seed,
        "path_index": path.path_index,
        "h": path.grid.h,
        "dt": path.grid.dt,
        "T": path.grid.T,
        "nt": path.grid.nt,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    for v in arrays.values():
        fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_path(fh):
    """Inverse of :func:`dump_path`; returns (header, dict of arrays)."""
    if fh.read(8) != MAGIC:
        raise ValidationError("not a path dump")
    (size,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(size))
    out = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"]))
        out[entry["name"]] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(entry["shape"])
    return header, out
