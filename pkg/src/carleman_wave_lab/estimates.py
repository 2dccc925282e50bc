"""Monte Carlo evaluation of the integrated Carleman, observability and trace estimates.

All inequality checks here are empirical: they report both sides and their
ratio, never a claimed constant.  Weighted integrals are assembled in log
space and normalised by the largest log weight, so ratios are insensitive to
constant shifts of the weight exponent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Iterator, Optional

import numpy as np

from .errors import ObservabilityViolation, ValidationError
from .geometry import DomainSpec, GeometryReport, observation_boundary, require_admissible
from .multiplier import IdentityMatrix, multiplier, reduce_field
from .spde_sim import (
    CoefficientSet,
    Grid,
    NormBundle,
    PathBatch,
    PerPathGrid,
    SolutionPath,
    boundary_normal_trace,
    coefficient_norms,
    full_gradient,
)
from .weights import DEFAULT_EXP_CAP, PositivityCertificate, WeightParams, check_cap, log_Theta


def iter_batches(ensemble) -> Iterator[PathBatch]:
    """Yield PathBatch objects from a path, a batch or any (lazy) iterable of them."""
    if isinstance(ensemble, SolutionPath):
        yield PathBatch.from_path(ensemble)
    elif isinstance(ensemble, PathBatch):
        yield ensemble
    else:
        for e in ensemble:
            yield from iter_batches(e)


def run_reducers(ensemble, reducers):
    """Feed every batch once to each reducer and return their results.

    A lazy ensemble (e.g. :func:`spde_sim.iterate_batches`) is consumed once,
    so several reports cost a single simulation pass.
    """
    seen = False
    for b in iter_batches(ensemble):
        seen = True
        for r in reducers:
            r.update(b)
    if not seen:
        raise ValidationError("empty ensemble")
    return [r.result() for r in reducers]


class _Accumulator:
    """Per-path samples of several named quantities, reduced in a fixed order."""

    def __init__(self):
        self.values = {}

    def add(self, name, arr):
        self.values.setdefault(name, []).append(np.asarray(arr, dtype=float))

    def samples(self, name):
        v = self.values.get(name)
        return np.concatenate(v) if v else np.zeros(0)

    def mean_se(self, name):
        s = self.samples(name)
        if s.size == 0:
            return 0.0, 0.0
        se = float(np.std(s, ddof=1) / math.sqrt(s.size)) if s.size > 1 else 0.0
        return float(np.mean(s)), se


def _space_time_weights(grid: Grid):
    n = grid.domain.n
    return grid.time_weights().reshape((-1,) + (1,) * n) * grid.domain.quadrature_weights()


def _sum_st(w, a):
    """Integrate (P, nt+1, *space) against space-time weights."""
    axes = tuple(range(1, a.ndim))
    return np.sum(w * a, axis=axes)


def lambda_star(norms: NormBundle, C_user: float = 1.0) -> float:
    """C (1 + |(a1, a4)|^2 + |a2|^2 + |a3|^2)."""
    if not C_user > 0:
        raise ValidationError(f"C_user={C_user}: must be positive")
    return C_user * (1.0 + norms.exponent)


def certified_lambda(norms: NormBundle, cert: PositivityCertificate, C_user: float = 1.0) -> float:
    """lambda* doubled until it reaches the certified lambda0."""
    lam = lambda_star(norms, C_user)
    while lam < cert.lambda0:
        lam *= 2.0
    return lam


# -- integrated Carleman estimate --------------------------------------------

@dataclass
class CarlemanReport:
    lhs: float
    rhs_boundary: float
    rhs_source: float
    empirical_C: float
    lam: float
    num_paths: int
    mc_std_errors: dict
    chain: dict = field(default_factory=dict)
    log_scale: float = 0.0

    def as_dict(self):
        d = asdict(self)
        d["mc_std_errors"] = dict(self.mc_std_errors)
        d["chain"] = dict(self.chain)
        return d


def _phi0(d):
    """int_0^1 (1 - u) e^{d u} du, stable for small |d|; d clipped to the exp range."""
    d = np.clip(np.asarray(d, dtype=float), -700.0, 700.0)
    small = np.abs(d) < 1e-4
    ds = np.where(small, 1.0, d)
    big = (np.expm1(ds) - ds) / ds**2
    return np.where(small, 0.5 + d / 6 + d**2 / 24, big)


def fitted_weights(g, h):
    """Nodal weights w_j with sum_j w_j e^{g_j} F_j = int e^{g} F for piecewise-linear g and F.

    Exponentially fitted trapezoid rule: exact when both the log weight and
    the integrand are linear on every cell; equal to the trapezoid rule when
    g is constant.  Nodes with g = -inf get weight 0.
    """
    g = np.asarray(g, dtype=float)
    w = np.zeros(g.shape)
    with np.errstate(invalid="ignore"):
        d = np.diff(g)
    d = np.where(np.isnan(d), 0.0, d)
    w[:-1] += h * _phi0(d)
    w[1:] += h * _phi0(-d)
    return np.where(np.isfinite(g), w, 0.0)


def _log_weight_parts(grid: Grid, p: WeightParams):
    """Separable pieces of log(Theta theta^2): a time part and one part per axis."""
    t = grid.times
    gt = log_Theta(t, p) - 2 * p.lam * p.c * (t - p.T / 2) ** 2 + 2 * p.ell_shift
    gx = [2 * p.lam * (ax - x0) ** 2 for ax, x0 in zip(grid.domain.axes(), p.x0)]
    return gt, gx


class _GridBound:
    """Reducer base: binds to the grid of the first batch it sees."""

    grid: Optional[Grid] = None

    def update(self, b: PathBatch):
        if self.grid is None:
            self.grid = b.grid
            self._setup(b.grid)
        elif b.grid != self.grid:
            raise ValidationError("all paths must share one grid")
        if b.y.shape[0]:
            self._update(b)

    def _setup(self, grid):
        pass


class CarlemanReducer(_GridBound):
    """Streaming form of :func:`carleman_budget`."""

    def __init__(self, geom: GeometryReport, p: WeightParams, coeffs: CoefficientSet,
                 certificate: Optional[PositivityCertificate], cap: float = DEFAULT_EXP_CAP):
        if certificate is None:
            raise ValidationError("carleman_budget requires a positivity certificate")
        if p.lam < certificate.lambda0:
            raise ValidationError(f"lambda={p.lam} is below the certified lambda0={certificate.lambda0}")
        self.geom, self.p, self.coeffs, self.cert, self.cap = geom, p, coeffs, certificate, cap
        self.acc = _Accumulator()

    def _setup(self, grid):
        p, dom = self.p, grid.domain
        n = dom.n
        if dom.shape == "disk":
            raise ValidationError("weighted budgets need a tensor grid")
        gt, gx = _log_weight_parts(grid, p)
        bnd = dom.boundary()
        logw = gt.reshape((-1,) + (1,) * n) + sum(
            g.reshape((1,) * (k + 1) + (-1,) + (1,) * (n - k - 1)) for k, g in enumerate(gx))
        logwb = gt[:, None] + 2 * p.lam * np.sum((bnd.points - np.asarray(p.x0)) ** 2, axis=-1)[None]
        check_cap(logw, grid.times.reshape((-1,) + (1,) * n), dom.points()[None], p, self.cap)
        check_cap(logwb, grid.times[:, None], bnd.points[None], p, self.cap)
        # normalise by the largest log weight; reported terms are scaled back
        self.L = float(max(np.max(logw[np.isfinite(logw)]), np.max(logwb[np.isfinite(logwb)])))
        self.wgt = np.exp(logw - self.L)
        self.wgt_b = np.exp(logwb - self.L)
        # fitted quadrature weights, separable in t and in each x_k
        wt = fitted_weights(gt, grid.dt)
        ws = np.ones(dom.grid_shape())
        for k, g in enumerate(gx):
            ws = ws * fitted_weights(g, dom.h).reshape((1,) * k + (-1,) + (1,) * (n - k - 1))
        self.wspace = ws
        self.wst = wt.reshape((-1,) + (1,) * n) * ws * self.wgt
        self.tw = wt
        self.bnd = bnd
        self.mask = observation_boundary(dom, bnd)
        self.xnu = np.einsum("mi,mi->m", bnd.points - np.asarray(p.x0), bnd.normals)
        tt = grid.times.reshape((-1,) + (1,) * n)
        XX = dom.points()[None]
        self.wj = p.weight().jet(tt, XX)
        self.pj = p.psi_field(n).jet(tt, XX)
        self.bj = IdentityMatrix(n).jet(tt, XX)
        src = 0.0
        if not self.coeffs.is_zero("f"):
            src = src + self.coeffs.sample("f", grid) ** 2
        if not self.coeffs.is_zero("g"):
            src = src + p.lam * self.coeffs.sample("g", grid) ** 2
        self.src = float(np.sum(self.wst * src))

    def _update(self, b: PathBatch):
        dom, lam, acc = self.grid.domain, self.p.lam, self.acc
        n = dom.n
        y, z = b.y, b.z
        gy = full_gradient(y, dom.h, n)
        dens = z**2 + np.sum(gy**2, axis=-1) + lam**2 * y**2
        acc.add("lhs", lam * _sum_st(self.wst, dens))
        tr2 = boundary_normal_trace(b, self.bnd) ** 2
        bw = self.tw[:, None] * self.wgt_b * self.bnd.weights
        acc.add("rhs_boundary", lam * np.sum(bw * self.mask * tr2, axis=(1, 2)))
        acc.add("boundary_full", 2 * lam * np.sum(bw * self.xnu * tr2, axis=(1, 2)))
        acc.add("rhs_source", np.full(len(y), self.src))

        s = reduce_field(y, z, gy, self.wj)
        M = multiplier(s, self.wj, self.pj, self.bj)
        acc.add("interior", _sum_st(self.wst, self.cert.c0 * lam * dens + M**2))
        sig = _diffusion(self.coeffs, b)
        pair = _sum_st(self.wst, M * _drift(self.coeffs, b, gy))
        # Ito sum with left end points
        axes = tuple(range(2, y.ndim))
        wM = np.sum(self.wspace * (self.wgt * M * sig)[:, :-1], axis=axes)
        acc.add("pairing", pair + np.sum(wM * b.dW, axis=1))
        acc.add("ito", -_sum_st(self.wst, self.wj.lt * sig**2))

    def result(self) -> CarlemanReport:
        acc = self.acc
        names = ("lhs", "rhs_boundary", "rhs_source", "interior", "pairing", "ito", "boundary_full")
        means, ses = {}, {}
        for k in names:
            means[k], ses[k] = acc.mean_se(k)
        scale = math.exp(self.L)
        rhs = means["rhs_boundary"] + means["rhs_source"]
        if rhs > 0:
            C = means["lhs"] / rhs
        elif means["lhs"] == 0:
            C = 0.0
        else:
            C = math.inf
        chain = {
            "interior": means["interior"] * scale,
            "pairing": means["pairing"] * scale,
            "ito": means["ito"] * scale,
            "boundary": means["boundary_full"] * scale,
        }
        chain["gap"] = chain["pairing"] + chain["ito"] + chain["boundary"] - chain["interior"]
        return CarlemanReport(
            lhs=means["lhs"] * scale,
            rhs_boundary=means["rhs_boundary"] * scale,
            rhs_source=means["rhs_source"] * scale,
            empirical_C=C,
            lam=self.p.lam,
            num_paths=int(acc.samples("lhs").size),
            mc_std_errors={k: ses[k] * scale for k in ("lhs", "rhs_boundary", "rhs_source")},
            chain=chain,
            log_scale=self.L,
        )


def carleman_budget(ensemble, geom: GeometryReport, p: WeightParams, coeffs: CoefficientSet,
                    certificate: Optional[PositivityCertificate] = None,
                    cap: float = DEFAULT_EXP_CAP) -> CarlemanReport:
    """Both sides of the integrated Carleman estimate over an ensemble of paths.

    Terms (each an ensemble mean of a per-path trapezoid integral):
      lhs          lam E int Theta theta^2 (y_t^2 + |grad y|^2 + lam^2 y^2)
      rhs_boundary lam E int_{Sigma_0} Theta theta^2 |dy/dnu|^2
      rhs_source   E int Theta theta^2 (f^2 + lam g^2)
    ``chain`` holds the intermediate terms of the integrated pointwise
    estimate: the interior positive term, the operator pairing (drift plus
    Ito sum), the Ito correction and the full boundary term.
    """
    return run_reducers(ensemble, [CarlemanReducer(geom, p, coeffs, certificate, cap)])[0]


def _per_path(coeffs, name):
    return isinstance(getattr(coeffs, name), PerPathGrid)


def _coef_on(coeffs, name, b: PathBatch):
    if _per_path(coeffs, name):
        return np.stack([coeffs.sample(name, b.grid, int(i)) for i in b.path_indices])
    return coeffs.sample(name, b.grid)[None]


def _drift(coeffs: CoefficientSet, b: PathBatch, gy):
    """a1 y_t + a2 . grad y + a3 y + f on the node grid."""
    out = np.zeros_like(b.y)
    if not coeffs.is_zero("a1"):
        out += _coef_on(coeffs, "a1", b) * b.z
    if not coeffs.is_zero("a2"):
        out += np.einsum("p...i,p...i->p...", np.broadcast_to(_coef_on(coeffs, "a2", b), gy.shape), gy)
    if not coeffs.is_zero("a3"):
        out += _coef_on(coeffs, "a3", b) * b.y
    if not coeffs.is_zero("f"):
        out += _coef_on(coeffs, "f", b)
    return out


def _diffusion(coeffs: CoefficientSet, b: PathBatch):
    out = np.zeros_like(b.y)
    if not coeffs.is_zero("a4"):
        out += _coef_on(coeffs, "a4", b) * b.y
    if not coeffs.is_zero("g"):
        out += _coef_on(coeffs, "g", b)
    return out


# -- observability -----------------------------------------------------------

@dataclass
class ObservabilityReport:
    terminal_norm: float
    trace_term: float
    f_term: float
    g_term: float
    coefficient_norm_exponent: float
    empirical_ratio: float
    num_paths: int
    violation: bool = False

    def as_dict(self):
        return asdict(self)

    def check(self):
        if self.violation:
            raise ObservabilityViolation(
                f"terminal norm {self.terminal_norm!r} is positive while the observation side is 0"
            )


def _state_norm_sq(y, z, dom: DomainSpec):
    """|grad y|^2 + y^2 + y_t^2 integrated over G, per path at one time level."""
    w = dom.quadrature_weights()
    axes = tuple(range(1, y.ndim))
    gy = full_gradient(y, dom.h, dom.n)
    return np.sum(w * (np.sum(gy**2, axis=-1) + y**2 + z**2), axis=axes)


class ObservabilityReducer(_GridBound):
    def __init__(self, geom: GeometryReport, coeffs: CoefficientSet, T: Optional[float] = None,
                 norms: Optional[NormBundle] = None):
        self.geom, self.coeffs, self.T, self.norms = geom, coeffs, T, norms
        self.acc = _Accumulator()

    def _setup(self, grid):
        if self.T is not None and abs(self.T - grid.T) > 1e-9 * grid.T:
            raise ValidationError(f"T={self.T} does not match the simulated horizon {grid.T}")
        require_admissible(grid.T, self.geom.R0, self.geom.R1, self.geom.c)
        self.bnd = grid.domain.boundary()
        self.mask = observation_boundary(grid.domain, self.bnd)
        self.bw = grid.time_weights()[:, None] * self.bnd.weights

    def _update(self, b: PathBatch):
        dom = self.grid.domain
        self.acc.add("terminal", _state_norm_sq(b.y[:, -1], b.z[:, -1], dom))
        tr = boundary_normal_trace(b, self.bnd)
        self.acc.add("trace", np.sum(self.bw * self.mask * tr**2, axis=(1, 2)))

    def result(self) -> ObservabilityReport:
        nb = self.norms if self.norms is not None else coefficient_norms(self.coeffs, self.grid)
        terminal = math.sqrt(self.acc.mean_se("terminal")[0])
        trace = math.sqrt(self.acc.mean_se("trace")[0])
        rhs = trace + nb.f + nb.g
        violation = False
        if rhs > 0:
            ratio = terminal / rhs
        elif terminal == 0:
            ratio = 0.0
        else:
            ratio = math.inf
            violation = True
        return ObservabilityReport(terminal, trace, nb.f, nb.g, nb.exponent, ratio,
                                   int(self.acc.samples("terminal").size), violation)


def observability_ratio(ensemble, geom: GeometryReport, coeffs: CoefficientSet, T: Optional[float] = None,
                        norms: Optional[NormBundle] = None) -> ObservabilityReport:
    """Terminal state norm against boundary observation plus source norms.

    terminal_norm = (E |(y(T), y_t(T))|^2)^{1/2}; trace_term =
    (E int_0^T int_{Gamma_0} |dy/dnu|^2)^{1/2}; f_term, g_term are the
    L^2(Q) norms.  0/0 gives ratio 0; a zero observation side with a
    positive terminal norm sets ``violation``.
    """
    return run_reducers(ensemble, [ObservabilityReducer(geom, coeffs, T, norms)])[0]


# -- hidden regularity -------------------------------------------------------

@dataclass
class HiddenRegularityReport:
    trace_norm: float
    rhs_bound_shape: float
    data_norm: float
    num_paths: int

    def as_dict(self):
        return asdict(self)


class HiddenRegularityReducer(_GridBound):
    def __init__(self, coeffs: CoefficientSet, norms: Optional[NormBundle] = None):
        self.coeffs, self.norms = coeffs, norms
        self.acc = _Accumulator()

    def _setup(self, grid):
        self.bnd = grid.domain.boundary()
        self.bw = grid.time_weights()[:, None] * self.bnd.weights

    def _update(self, b: PathBatch):
        tr = boundary_normal_trace(b, self.bnd)
        self.acc.add("trace", np.sum(self.bw * tr**2, axis=(1, 2)))
        self.acc.add("data", _state_norm_sq(b.y[:, 0], b.z[:, 0], self.grid.domain))

    def result(self) -> HiddenRegularityReport:
        trace = math.sqrt(self.acc.mean_se("trace")[0])
        if not math.isfinite(trace):
            raise ValidationError("trace norm is not finite")
        nb = self.norms if self.norms is not None else coefficient_norms(self.coeffs, self.grid)
        data = math.sqrt(self.acc.mean_se("data")[0])
        shape = (data + nb.f + nb.g) * math.exp(nb.exponent)
        return HiddenRegularityReport(trace, shape, data, int(self.acc.samples("trace").size))


def hidden_regularity_check(ensemble, coeffs: CoefficientSet, norms: Optional[NormBundle] = None) -> HiddenRegularityReport:
    """Full-boundary trace norm and the trace bound's right side with C = 1 (shape only)."""
    return run_reducers(ensemble, [HiddenRegularityReducer(coeffs, norms)])[0]
