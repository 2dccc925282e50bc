"""Spatial domains, the exterior point x0 and the admissibility conditions.

Three shapes are supported: an interval in R^1, an axis-aligned rectangle in
R^2 and a disk in R^2.  For all of them the outward normal and the extreme
distances to x0 are available in closed form, so nothing downstream depends
on mesh-normal estimation.

Boundary "nodes" are the points at which normal traces are sampled.  For the
interval they are its two endpoints.  For the rectangle every face carries its
own copy of the grid nodes lying on it (corners therefore appear once per
adjacent face) together with trapezoid surface weights.  For the disk they are
equally spaced points on the circle; a disk has no finite-difference grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from .errors import GeometryError, InfeasibleWindowError

SHAPES = ("interval", "rectangle", "disk")


@dataclass(frozen=True)
class Boundary:
    """Sampled boundary of a domain.

    ``index`` holds one integer array per spatial axis giving the grid node of
    each boundary entry (None for the disk), ``axis``/``sign`` the direction
    of the outward normal for grid shapes.
    """

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    index: Optional[Tuple[np.ndarray, ...]] = None
    axis: Optional[np.ndarray] = None
    sign: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class DomainSpec:
    shape: str
    h: float
    x0: Tuple[float, ...]
    lower: Tuple[float, ...] = ()
    upper: Tuple[float, ...] = ()
    center: Tuple[float, ...] = ()
    radius: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise GeometryError(f"shape={self.shape!r}: expected one of {SHAPES}")
        if not self.h > 0:
            raise GeometryError(f"h={self.h}: grid spacing must be positive")
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        if self.shape in ("interval", "rectangle"):
            lo = tuple(float(v) for v in np.atleast_1d(self.lower))
            hi = tuple(float(v) for v in np.atleast_1d(self.upper))
            want = 1 if self.shape == "interval" else 2
            if len(lo) != want or len(hi) != want:
                raise GeometryError(f"{self.shape} needs {want}-dimensional lower/upper")
            if any(b <= a for a, b in zip(lo, hi)):
                raise GeometryError(f"lower={lo}, upper={hi}: empty {self.shape}")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        else:
            ctr = tuple(float(v) for v in np.atleast_1d(self.center))
            if len(ctr) != 2:
                raise GeometryError("disk center must be a point in R^2")
            if not self.radius > 0:
                raise GeometryError(f"radius={self.radius}: must be positive")
            object.__setattr__(self, "center", ctr)
        if len(self.x0) != self.n:
            raise GeometryError(f"x0={self.x0} does not live in R^{self.n}")
        if not self.distance_to_closure(self.x0) > 0:
            raise GeometryError(f"x0={self.x0} lies in the closure of the domain")

    # -- constructors -----------------------------------------------------
    @classmethod
    def interval(cls, a, b, x0, h):
        return cls("interval", h=h, x0=(x0,) if np.isscalar(x0) else x0, lower=(a,), upper=(b,))

    @classmethod
    def rectangle(cls, lower, upper, x0, h):
        return cls("rectangle", h=h, x0=x0, lower=lower, upper=upper)

    @classmethod
    def disk(cls, center, radius, x0, h):
        return cls("disk", h=h, x0=x0, center=center, radius=radius)

    # -- basic queries ----------------------------------------------------
    @property
    def n(self) -> int:
        return 1 if self.shape == "interval" else 2

    def distance_to_closure(self, p) -> float:
        p = np.asarray(p, dtype=float)
        if self.shape == "disk":
            return max(float(np.linalg.norm(p - np.array(self.center))) - self.radius, 0.0)
        lo, hi = np.array(self.lower), np.array(self.upper)
        return float(np.linalg.norm(p - np.clip(p, lo, hi)))

    def contains(self, pts) -> np.ndarray:
        """Membership in the closed domain for points of shape (..., n)."""
        pts = np.asarray(pts, dtype=float)
        if self.shape == "disk":
            return np.linalg.norm(pts - np.array(self.center), axis=-1) <= self.radius
        lo, hi = np.array(self.lower), np.array(self.upper)
        return np.all((pts >= lo) & (pts <= hi), axis=-1)

    # -- finite-difference grid ------------------------------------------
    def grid_shape(self) -> Tuple[int, ...]:
        if self.shape == "disk":
            raise GeometryError("disk domains have no finite-difference grid")
        counts = []
        for a, b in zip(self.lower, self.upper):
            cells = (b - a) / self.h
            m = int(round(cells))
            if m < 2 or abs(m - cells) > 1e-9 * max(1.0, cells):
                raise GeometryError(
                    f"h={self.h} does not divide the side [{a}, {b}] into at least 2 cells"
                )
            counts.append(m + 1)
        return tuple(counts)

    def axes(self) -> Tuple[np.ndarray, ...]:
        return tuple(
            a + self.h * np.arange(m) for a, m in zip(self.lower, self.grid_shape())
        )

    def points(self) -> np.ndarray:
        """Grid node coordinates, shape grid_shape + (n,)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    def quadrature_weights(self) -> np.ndarray:
        """Tensor-product trapezoid weights on the grid."""
        w = None
        for m in self.grid_shape():
            w1 = np.full(m, self.h)
            w1[0] = w1[-1] = 0.5 * self.h
            w = w1 if w is None else np.multiply.outer(w, w1)
        return w

    def boundary(self) -> Boundary:
        if self.shape == "interval":
            (a,), (b,) = self.lower, self.upper
            m = self.grid_shape()[0]
            return Boundary(
                points=np.array([[a], [b]]),
                normals=np.array([[-1.0], [1.0]]),
                weights=np.ones(2),
                index=(np.array([0, m - 1]),),
                axis=np.array([0, 0]),
                sign=np.array([-1, 1]),
            )
        if self.shape == "rectangle":
            shape = self.grid_shape()
            axes = self.axes()
            pts, nrm, wts, idx, ax, sg = [], [], [], [[], []], [], []
            for axis in (0, 1):
                other = 1 - axis
                m_other = shape[other]
                wline = np.full(m_other, self.h)
                wline[0] = wline[-1] = 0.5 * self.h
                for s, pos in ((-1, 0), (1, shape[axis] - 1)):
                    j = np.arange(m_other)
                    face_idx = [None, None]
                    face_idx[axis] = np.full(m_other, pos)
                    face_idx[other] = j
                    p = np.empty((m_other, 2))
                    p[:, axis] = axes[axis][pos]
                    p[:, other] = axes[other]
                    nv = np.zeros((m_other, 2))
                    nv[:, axis] = s
                    pts.append(p)
                    nrm.append(nv)
                    wts.append(wline)
                    idx[0].append(face_idx[0])
                    idx[1].append(face_idx[1])
                    ax.append(np.full(m_other, axis))
                    sg.append(np.full(m_other, s))
            return Boundary(
                points=np.concatenate(pts),
                normals=np.concatenate(nrm),
                weights=np.concatenate(wts),
                index=(np.concatenate(idx[0]), np.concatenate(idx[1])),
                axis=np.concatenate(ax),
                sign=np.concatenate(sg),
            )
        m = max(8, math.ceil(2 * math.pi * self.radius / self.h))
        phi = 2 * math.pi * np.arange(m) / m
        nrm = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
        return Boundary(
            points=np.array(self.center) + self.radius * nrm,
            normals=nrm,
            weights=np.full(m, 2 * math.pi * self.radius / m),
        )


def radii(domain: DomainSpec) -> Tuple[float, float]:
    """Closed-form (min, max) of |x - x0| over the closed domain."""
    x0 = np.array(domain.x0)
    if domain.shape == "disk":
        d = float(np.linalg.norm(x0 - np.array(domain.center)))
        R0, R1 = d - domain.radius, d + domain.radius
    else:
        lo, hi = np.array(domain.lower), np.array(domain.upper)
        R0 = float(np.linalg.norm(x0 - np.clip(x0, lo, hi)))
        far = np.maximum(np.abs(x0 - lo), np.abs(x0 - hi))
        R1 = float(np.linalg.norm(far))
    if not R0 > 0:
        raise GeometryError(f"x0={domain.x0} lies in the closure of the domain")
    return R0, R1


def observation_boundary(domain: DomainSpec, boundary: Optional[Boundary] = None) -> np.ndarray:
    """Mask of boundary nodes with (x - x0) . nu(x) > 0 (ties excluded)."""
    bnd = domain.boundary() if boundary is None else boundary
    dots = np.einsum("mi,mi->m", bnd.points - np.array(domain.x0), bnd.normals)
    return dots > 0


def critical_c(R0: float, R1: float) -> float:
    """Root of (4 + 5c) R0^2 = 9 c R1^2; feasible c form (0, critical_c)."""
    _check_radii(R0, R1)
    return 4 * R0**2 / (9 * R1**2 - 5 * R0**2)


def c_condition(R0: float, R1: float, c: float) -> bool:
    return (4 + 5 * c) * R0**2 / (9 * c) > R1**2


def select_c(R0: float, R1: float, strategy: Union[str, float] = "midpoint") -> float:
    """Pick the weight constant c.

    ``strategy`` is "midpoint" (half the critical value) or a user value,
    which is validated and returned unchanged.
    """
    crit = critical_c(R0, R1)
    if isinstance(strategy, str):
        if strategy != "midpoint":
            raise GeometryError(f"c strategy {strategy!r}: expected 'midpoint' or a number")
        return crit / 2
    c = float(strategy)
    if not 0 < c < 1 or not c_condition(R0, R1, c):
        raise GeometryError(
            f"c={c} violates (4+5c) R0^2/(9c) > R1^2 with R0={R0}, R1={R1}; "
            f"need 0 < c < {crit!r}"
        )
    return c


@dataclass(frozen=True)
class TimeWindow:
    lower: float
    upper: float

    @property
    def empty(self) -> bool:
        return not self.lower < self.upper

    def contains(self, T: float) -> bool:
        return self.lower < T < self.upper

    def midpoint(self) -> float:
        return 0.5 * (self.lower + self.upper)


def admissible_time_window(R0: float, R1: float, c: float) -> TimeWindow:
    """Open interval of T with 4(4+5c)R0^2/(9c) > c^2 T^2 > 4 R1^2 and T > 2 R1."""
    _check_radii(R0, R1)
    lo = max(2 * R1 / c, 2 * R1)
    hi = (2 / c) * math.sqrt((4 + 5 * c) * R0**2 / (9 * c))
    return TimeWindow(lo, hi)


def time_conditions_hold(R0, R1, c, T) -> bool:
    """Direct re-evaluation of both strict inequalities plus T > 2 R1."""
    return (4 * (4 + 5 * c) * R0**2 / (9 * c) > c**2 * T**2 > 4 * R1**2) and T > 2 * R1


def require_admissible(T: float, R0: float, R1: float, c: float) -> None:
    win = admissible_time_window(R0, R1, c)
    if win.empty:
        raise InfeasibleWindowError(
            f"c={c}: admissible window for T is empty "
            f"(need 4(4+5c)R0^2/(9c) > c^2 T^2 > 4R1^2 with R0={R0}, R1={R1})"
        )
    if not win.contains(T):
        raise InfeasibleWindowError(
            f"T={T} violates 4(4+5c)R0^2/(9c) > c^2 T^2 > 4R1^2 "
            f"(R0={R0}, R1={R1}, c={c}); admissible T in ({win.lower!r}, {win.upper!r})"
        )


def _check_radii(R0, R1):
    if not 0 < R0 < R1:
        raise GeometryError(f"R0={R0}, R1={R1}: need 0 < R0 < R1")


@dataclass(frozen=True)
class GeometryReport:
    R0: float
    R1: float
    gamma0_mask: np.ndarray = field(repr=False)
    c: float
    T_window: TimeWindow
    n: int = 1

    def as_dict(self):
        return {
            "R0": self.R0,
            "R1": self.R1,
            "c": self.c,
            "T_lower": self.T_window.lower,
            "T_upper": self.T_window.upper,
            "n": self.n,
            "gamma0_nodes": [int(i) for i in np.flatnonzero(self.gamma0_mask)],
        }


def analyze(domain: DomainSpec, c: Union[str, float] = "midpoint") -> GeometryReport:
    R0, R1 = radii(domain)
    cc = select_c(R0, R1, c)
    return GeometryReport(
        R0=R0,
        R1=R1,
        gamma0_mask=observation_boundary(domain),
        c=cc,
        T_window=admissible_time_window(R0, R1, cc),
        n=domain.n,
    )


def brute_force_radii(domain: DomainSpec, h: float) -> Tuple[float, float]:
    """Grid-scan estimate of (R0, R1); used only as an independent oracle."""
    x0 = np.array(domain.x0)
    if domain.shape == "disk":
        c = np.array(domain.center)
        r = domain.radius
        s = np.arange(-r, r + h / 2, h)
        X, Y = np.meshgrid(c[0] + s, c[1] + s, indexing="ij")
        pts = np.stack([X, Y], axis=-1)
        pts = pts[np.linalg.norm(pts - c, axis=-1) <= r]
        phi = np.linspace(0, 2 * np.pi, max(64, int(2 * np.pi * r / h)))
        rim = c + r * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
        pts = np.concatenate([pts, rim])
    else:
        axes = [np.linspace(a, b, max(2, int(round((b - a) / h)) + 1))
                for a, b in zip(domain.lower, domain.upper)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.n)
    d = np.linalg.norm(pts - x0, axis=-1)
    return float(d.min()), float(d.max())
