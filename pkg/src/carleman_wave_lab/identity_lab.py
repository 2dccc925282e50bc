"""Numerical checks of the weighted multiplier identity and the pointwise estimates.

All pointwise work is done on the reduced state (everything divided by
theta^2, or by Theta theta^2 for the singular weight).  Derivatives of the
weighted fluxes use the product rule: the log-weight derivative is exact and
only the reduced flux is differenced, so steep weights (large lambda) cost
no resolution and nothing is ever exponentiated on its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .fields import EMPTY, Factor
from .geometry import require_admissible
from .multiplier import (
    IdentityMatrix,
    A_general,
    B_general,
    is_symmetric,
    multiplier,
    operator_term,
    quadratic_coefficients,
    reduce_field,
    rhs_parts,
    space_flux,
    time_flux,
)
from .spde_sim import Grid, generate_brownian, standard_normals
from .weights import (
    DEFAULT_EXP_CAP,
    PositivityCertificate,
    WeightParams,
    weighted_exp,
)

BUDGET_TERMS = (
    "lhs_operator_term",
    "lhs_divergence_term",
    "lhs_d_term",
    "rhs_quadratic_forms",
    "rhs_b_term",
    "rhs_square_term",
    "rhs_ito_term",
)


@dataclass
class IdentityBudget:
    """Space-time integrals of every group of the identity.

    ``rhs_quadratic_forms`` holds the v_t^2, v_i v_t and v_i v_j forms,
    ``rhs_b_term`` the B v^2 term and ``rhs_square_term`` the squared
    multiplier.  ``residual_l1`` is the integral of the absolute pointwise
    residual, the quantity whose refinement order is measured.
    """

    lhs_operator_term: float
    lhs_divergence_term: float
    lhs_d_term: float
    rhs_quadratic_forms: float
    rhs_b_term: float
    rhs_square_term: float
    rhs_ito_term: float
    residual: float
    residual_l1: float
    scale: float
    h: float
    dt: float
    lam: float

    @property
    def lhs_total(self):
        return self.lhs_operator_term + self.lhs_divergence_term + self.lhs_d_term

    @property
    def rhs_total(self):
        return self.rhs_quadratic_forms + self.rhs_b_term + self.rhs_square_term + self.rhs_ito_term

    def rows(self):
        """CSV rows (h, dt, lambda, term, value, residual)."""
        return [(self.h, self.dt, self.lam, name, getattr(self, name), self.residual)
                for name in BUDGET_TERMS + ("residual_l1",)]


# -- helpers -----------------------------------------------------------------

def _resolve_weight(p):
    if isinstance(p, WeightParams):
        return p.weight(), p.lam
    return p, getattr(p, "lam", float("nan"))


def _node_arrays(grid: Grid):
    t = grid.times
    X = grid.domain.points()
    n = grid.domain.n
    tt = t.reshape((-1,) + (1,) * n)
    XX = X[None]
    return tt, XX


def _check_support(field_, grid: Grid):
    ts = field_.time_support()
    ss = field_.space_support()
    if ts == EMPTY or any(s == EMPTY for s in ss):
        return
    if ts is None or not (ts[0] > 0 and ts[1] < grid.T):
        raise ValidationError(
            f"field time support {ts} must lie strictly inside (0, {grid.T}); multiply by a cutoff"
        )
    lo, hi = grid.domain.lower, grid.domain.upper
    for k, s in enumerate(ss):
        if s is None or not (s[0] > lo[k] and s[1] < hi[k]):
            raise ValidationError(
                f"field support {s} along axis {k} must lie strictly inside ({lo[k]}, {hi[k]})"
            )


def _centered(F, step, axis):
    """Centred difference along ``axis`` on its interior (length reduced by 2)."""
    n = F.shape[axis]
    sl = lambda a, b: tuple(slice(a, b) if k == axis else slice(None) for k in range(F.ndim))
    return (F[sl(2, n)] - F[sl(0, n - 2)]) / (2 * step)


def _interior(shape):
    return tuple(slice(1, -1) for _ in shape)


def _pad_interior(val, shape):
    out = np.zeros(shape)
    out[_interior(shape)] = val
    return out


def _fd_groupings(Lt, Li, Wt, Vs, grid: Grid):
    """(d_t [e^L Wt], sum_j d_j [e^L V_j]) / e^L at interior space-time nodes, zero elsewhere.

    The log-weight derivatives (Lt, Li) are exact; only the reduced fluxes,
    which are smooth on the grid scale even when the weight is not, are
    differenced.
    """
    shape = Wt.shape
    n = grid.domain.n
    inner = _interior(shape)
    dt_part = _centered(Wt, grid.dt, 0)[(slice(None),) + inner[1:]] + (Lt * Wt)[inner]
    div = 0.0
    for j in range(n):
        axis = 1 + j
        d = _centered(Vs[..., j], grid.h, axis)
        sel = tuple(slice(None) if k == axis else slice(1, -1) for k in range(len(shape)))
        div = div + d[sel] + (Li[..., j] * Vs[..., j])[inner]
    return _pad_interior(dt_part, shape), _pad_interior(div, shape)


def _weights_st(grid: Grid):
    w = grid.time_weights().reshape((-1,) + (1,) * grid.domain.n)
    return w * grid.domain.quadrature_weights()[None]


# -- deterministic identity --------------------------------------------------

def identity_residual_deterministic(field_, b, p, psi=None, grid: Grid = None,
                                    cap: float = DEFAULT_EXP_CAP) -> IdentityBudget:
    """Budget of the identity for a deterministic compactly supported field.

    ``p`` is a :class:`WeightParams` or any weight object with ``jet``;
    ``b`` and ``psi`` are evaluators with ``jet(t, x)``.  With du_t = u_tt dt
    the Ito term is zero.
    """
    if grid is None:
        raise ValidationError("a space-time grid is required")
    n = grid.domain.n
    if grid.domain.shape == "disk":
        raise ValidationError("identity checks need a tensor grid (interval or rectangle)")
    weight, lam = _resolve_weight(p)
    if psi is None:
        if not isinstance(p, WeightParams):
            raise ValidationError("psi is required when p is not a WeightParams")
        psi = p.psi_field(n)
    _check_support(field_, grid)
    tt, XX = _node_arrays(grid)
    bj = b.jet(tt, XX)
    if not is_symmetric(bj):
        raise ValidationError("coefficient matrix b must be symmetric (b^ij = b^ji)")
    fj = field_.jet(tt, XX)
    wj = weight.jet(tt, XX)
    pj = psi.jet(tt, XX)
    shape = fj.u.shape

    s = reduce_field(fj.u, fj.ut, fj.ui, wj)
    A = A_general(wj, pj, bj)
    B = B_general(wj, pj, bj)
    coeffs = quadratic_coefficients(wj, pj, bj)
    op = operator_term(s, fj.utt, fj.ui, fj.uij, wj, pj, bj)
    forms, bterm, sq = rhs_parts(s, wj, pj, bj, A=A, B=B, coeffs=coeffs)
    Wt = time_flux(s, wj, pj, bj, A=A)
    Vs = space_flux(s, wj, pj, bj, A=A)

    logw = 2 * wj.l
    dterm, div = _fd_groupings(2 * wj.lt, 2 * wj.li, Wt, Vs, grid)
    mask = _pad_interior(np.ones(tuple(k - 2 for k in shape)), shape)
    op, forms, bterm, sq = (mask * a for a in (op, forms, bterm, sq))
    resid = op + div + dterm - forms - bterm - sq

    theta2 = weighted_exp(logw, cap, tt, XX, p if isinstance(p, WeightParams) else None)
    wq = _weights_st(grid) * theta2

    def integ(a):
        return float(np.sum(wq * a))

    vals = dict(
        lhs_operator_term=integ(op),
        lhs_divergence_term=integ(div),
        lhs_d_term=integ(dterm),
        rhs_quadratic_forms=integ(forms),
        rhs_b_term=integ(bterm),
        rhs_square_term=integ(sq),
        rhs_ito_term=0.0,
    )
    lhs = vals["lhs_operator_term"] + vals["lhs_divergence_term"] + vals["lhs_d_term"]
    rhs = vals["rhs_quadratic_forms"] + vals["rhs_b_term"] + vals["rhs_square_term"]
    scale = integ(np.abs(op) + np.abs(forms) + np.abs(bterm) + sq)
    return IdentityBudget(**vals, residual=lhs - rhs, residual_l1=integ(np.abs(resid)),
                          scale=scale, h=grid.h, dt=grid.dt, lam=lam)


@dataclass
class RefinementRow:
    h: float
    dt: float
    residual: float
    residual_l1: float
    scale: float
    order: float


def refinement_study(budget_at: Callable[[float], IdentityBudget], hs: Sequence[float]) -> List[RefinementRow]:
    """Evaluate ``budget_at(h)`` on a ladder of h and return observed orders of residual_l1."""
    rows = []
    prev = None
    for h in hs:
        bud = budget_at(h)
        order = float("nan")
        if prev is not None and bud.residual_l1 > 0 and prev[1] > 0:
            order = math.log(prev[1] / bud.residual_l1) / math.log(prev[0] / h)
        rows.append(RefinementRow(bud.h, bud.dt, bud.residual, bud.residual_l1, bud.scale, order))
        prev = (h, bud.residual_l1)
    return rows


def min_order(rows: Sequence[RefinementRow]) -> float:
    orders = [r.order for r in rows if not math.isnan(r.order)]
    return min(orders) if orders else float("nan")


# -- stochastic identity -----------------------------------------------------

@dataclass
class StochasticResult:
    mean: float
    std_error: float
    num_paths: int
    dt: float
    include_ito: bool
    residuals: np.ndarray = field(repr=False)
    ito_term: float = 0.0
    note: str = ""

    @property
    def z_score(self) -> float:
        if self.std_error == 0:
            return 0.0 if self.mean == 0 else math.inf
        return abs(self.mean) / self.std_error


class _Profile:
    """Spatial profile jets for u = phi(x) W(t)."""

    def __init__(self, phi):
        self.phi = phi

    def eval(self, x):
        if isinstance(self.phi, Factor):
            return self.phi.value(x), self.phi.d1(x), self.phi.d2(x)
        return tuple(np.asarray(a, dtype=float) for a in self.phi(x))


def _quadratic_parts(fn):
    """Given fn(a, b) quadratic in (a, b), return (alpha, beta, gamma) with
    fn = alpha a^2 + beta a b + gamma b^2."""
    qa = fn(1.0, 0.0)
    qb = fn(0.0, 1.0)
    qab = fn(1.0, 1.0)
    return qa, qab - qa - qb, qb


def identity_residual_stochastic(phi, p: WeightParams, grid: Grid, num_paths: int, seed: int,
                                 include_ito: bool = True, quad_nodes: int = 48,
                                 min_paths: int = 30) -> StochasticResult:
    """Time-integrated identity along paths of u = phi(x) W(t), W' = w Brownian, b = I, n = 1.

    Stochastic integrals use left-point (Ito) sums; dt integrals the
    trapezoid rule; the time differential and the spatial divergence are
    evaluated exactly at the end points.  Spatial integrals use
    Gauss-Legendre nodes on the grid's interval.
    """
    dom = grid.domain
    if dom.n != 1:
        raise ValidationError("the stochastic identity check is one-dimensional")
    weight = p.weight()
    psi_ev = p.psi_field(1)
    b_ev = IdentityMatrix(1)
    a, bnd = float(dom.lower[0]), float(dom.upper[0])
    gx, gw = np.polynomial.legendre.leggauss(quad_nodes)
    xq = 0.5 * (bnd - a) * gx + 0.5 * (bnd + a)
    wq = 0.5 * (bnd - a) * gw
    prof = _Profile(phi)
    t = grid.times
    nt = grid.nt

    def setup(xs):
        T2, X2 = np.meshgrid(t, xs, indexing="ij")
        X2 = X2[..., None]
        wj = weight.jet(T2, X2)
        pj = psi_ev.jet(T2, X2)
        bj = b_ev.jet(T2, X2)
        f0, f1, f2 = (np.broadcast_to(v, T2.shape) for v in prof.eval(X2[..., 0]))
        return wj, pj, bj, f0, f1, f2

    wj, pj, bj, f0, f1, f2 = setup(xq)
    A = A_general(wj, pj, bj)
    B = B_general(wj, pj, bj)
    coeffs = quadratic_coefficients(wj, pj, bj)
    theta2 = weighted_exp(2 * wj.l, DEFAULT_EXP_CAP, None, None, p)

    def state(W, w, f0=f0, f1=f1, wj=wj):
        return reduce_field(f0 * W, f0 * w, (f1 * W)[..., None], wj)

    def space_int(arr):
        return np.sum(arr * theta2 * wq, axis=-1)

    def Mphi(W, w):
        return space_int(multiplier(state(W, w), wj, pj, bj) * f0)

    m1, m2 = Mphi(1.0, 0.0), Mphi(0.0, 1.0)
    lap = _quadratic_parts(lambda W, w: space_int(multiplier(state(W, w), wj, pj, bj) * f2 * W))

    def rhs_fn(W, w):
        forms, bt, sq = rhs_parts(state(W, w), wj, pj, bj, A=A, B=B, coeffs=coeffs)
        return space_int(forms + bt + sq)

    rhs = _quadratic_parts(rhs_fn)
    tflux = _quadratic_parts(lambda W, w: space_int(time_flux(state(W, w), wj, pj, bj, A=A)))
    ito_density = space_int(wj.lt * f0**2)

    # exact boundary flux of the divergence term
    wb, pb, bb, g0, g1, _ = setup(np.array([a, bnd]))
    Ab = A_general(wb, pb, bb)
    th_b = weighted_exp(2 * wb.l, DEFAULT_EXP_CAP, None, None, p)

    def flux_fn(W, w):
        sb = reduce_field(g0 * W, g0 * w, (g1 * W)[..., None], wb)
        V = space_flux(sb, wb, pb, bb, A=Ab)[..., 0] * th_b
        return V[:, 1] - V[:, 0]

    flux = _quadratic_parts(flux_fn)

    tw = grid.time_weights()
    dt = grid.dt
    res = np.empty(num_paths)
    chunk = max(1, int(2e6 // (nt + 1)))
    for start in range(0, num_paths, chunk):
        idx = range(start, min(num_paths, start + chunk))
        dB = np.stack([generate_brownian(nt, seed, i, dt, stream=0) for i in idx])
        Z = np.stack([standard_normals(nt, seed, i, stream=1) for i in idx])
        w = np.zeros((len(dB), nt + 1))
        w[:, 1:] = np.cumsum(dB, axis=1)
        # exact increments of the integrated Brownian motion
        inc = w[:, :-1] * dt + 0.5 * dt * dB + math.sqrt(dt**3 / 12.0) * Z
        W = np.zeros_like(w)
        W[:, 1:] = np.cumsum(inc, axis=1)

        def Q(parts, Wv, wv):
            al, be, ga = parts
            return al * Wv**2 + be * Wv * wv + ga * wv**2

        ito_sum = np.sum((W[:, :-1] * m1[:-1] + w[:, :-1] * m2[:-1]) * dB, axis=1)
        lhs = (
            ito_sum
            - np.sum(tw * Q(lap, W, w), axis=1)
            + np.sum(tw * Q(flux, W, w), axis=1)
            + Q(tuple(q[-1] for q in tflux), W[:, -1], w[:, -1])
            - Q(tuple(q[0] for q in tflux), W[:, 0], w[:, 0])
        )
        rhs_v = np.sum(tw * Q(rhs, W, w), axis=1)
        res[start:start + len(idx)] = lhs - rhs_v
    ito_term = float(np.sum(tw * ito_density))
    if include_ito:
        res = res - ito_term
    mean = float(np.mean(res)) if num_paths else 0.0
    se = float(np.std(res, ddof=1) / math.sqrt(num_paths)) if num_paths > 1 else float("inf")
    note = ""
    if num_paths < min_paths:
        note = f"only {num_paths} paths; the standard error is unreliable below {min_paths}"
    return StochasticResult(mean, se, num_paths, dt, include_ito, res, ito_term, note)


# -- pointwise estimates -----------------------------------------------------

@dataclass
class PointwiseResult:
    min_margin: float
    tau: float
    violations: list
    mode: str
    h: float
    dt: float
    num_violations: int = 0

    @property
    def passed(self) -> bool:
        return self.num_violations == 0


def _validate_certificate(cert: Optional[PositivityCertificate], p: WeightParams, n: int):
    if cert is None:
        raise ValidationError("the singular-weight estimate requires a positivity certificate")
    if p.lam < cert.lambda0:
        raise ValidationError(f"lambda={p.lam} is below the certified lambda0={cert.lambda0}")
    if p.beta > cert.beta0 * (1 + 1e-12):
        raise ValidationError(f"beta={p.beta} exceeds the certified beta0={cert.beta0}")
    if abs(p.T - cert.T) > 1e-12 * cert.T or abs(p.c - cert.c) > 1e-15 or n != cert.n:
        raise ValidationError(
            f"certificate was issued for T={cert.T}, c={cert.c}, n={cert.n}; got T={p.T}, c={p.c}, n={n}"
        )
    require_admissible(p.T, cert.R0, cert.R1, p.c)


def pointwise_carleman_check(field_, p: WeightParams, grid: Grid, mode: str = "plain",
                             certificate: Optional[PositivityCertificate] = None,
                             time_window: Optional[Tuple[float, float]] = None,
                             tol_factor: float = 10.0, max_violations: int = 20) -> PointwiseResult:
    """Compare both sides of a pointwise estimate at interior nodes (b = I).

    ``mode="plain"``: plain weight, lower bound (1-k) lam v_t^2 + (k+3-4c) lam |grad v|^2
    + B v^2 + M^2.  ``mode="singular"``: Theta-weighted groupings against
    c0 lam Theta theta^2 (u_t^2 + |grad u|^2 + lam^2 u^2) + Theta M^2.

    Margins are normalised by the largest value over the checked nodes of
    lam (v_t^2 + |grad v|^2 + lam^2 v^2) + M^2 (reduced); a per-node scale
    would blow up where the field nearly vanishes.  The tolerance is
    largest normalised per-node allowance; a node is a violation when its
    deficit exceeds ``tol_factor`` times that node's own gap between the
    finite-difference groupings and their exact values.  ``time_window`` restricts the nodes that are checked.
    """
    n = grid.domain.n
    if mode not in ("plain", "singular"):
        raise ValidationError(f"mode={mode!r}: expected 'plain' or 'singular'")
    if mode == "singular":
        _validate_certificate(certificate, p, n)
    weight = p.weight()
    lam, c, k = p.lam, p.c, p.k
    tt, XX = _node_arrays(grid)
    fj = field_.jet(tt, XX)
    wj = weight.jet(tt, XX)
    shape = fj.u.shape
    pj = p.psi_field(n).jet(tt, XX)
    bj = IdentityMatrix(n).jet(tt, XX)

    s = reduce_field(fj.u, fj.ut, fj.ui, wj)
    A = A_general(wj, pj, bj)
    B = B_general(wj, pj, bj)
    op = operator_term(s, fj.utt, fj.ui, fj.uij, wj, pj, bj)
    forms, bterm, sq = rhs_parts(s, wj, pj, bj, A=A, B=B)
    Wt = time_flux(s, wj, pj, bj, A=A)
    Vs = space_flux(s, wj, pj, bj, A=A)
    exact = forms + bterm + sq
    Lt = 2 * wj.lt
    grad2 = np.sum(s.vi**2, axis=-1)
    if mode == "singular":
        t = np.broadcast_to(tt, shape)
        inside = (t > 0) & (t < p.T)
        with np.errstate(divide="ignore", invalid="ignore"):
            rate = np.where(inside, p.beta * (p.T - 2 * t) / (t**2 * (p.T - t) ** 2), 0.0)
        # d_t Theta / Theta; Theta itself vanishes at the two end times
        exact = exact + rate * Wt
        Lt = Lt + rate
        ut2 = fj.ut**2 + np.sum(fj.ui**2, axis=-1) + lam**2 * fj.u**2
        rhs = certificate.c0 * lam * ut2 + sq
    else:
        rhs = (1 - k) * lam * s.vt**2 + (k + 3 - 4 * c) * lam * grad2 + bterm + sq

    dterm, div = _fd_groupings(Lt, 2 * wj.li, Wt, Vs, grid)
    lhs_fd = op + div + dterm
    S = lam * (s.vt**2 + grad2 + lam**2 * s.v**2) + sq

    sel = np.zeros(shape, dtype=bool)
    sel[_interior(shape)] = True
    t_full = np.broadcast_to(tt, shape)
    if time_window is not None:
        sel &= (t_full >= time_window[0]) & (t_full <= time_window[1])
    sel &= S > 0
    if not sel.any():
        return PointwiseResult(0.0, 0.0, [], mode, grid.h, grid.dt, 0)
    scale = float(S[sel].max())
    raw = lhs_fd[sel] - rhs[sel]
    gap = np.abs(lhs_fd[sel] - exact[sel])
    # per-node allowance: discretisation gap plus round-off in the sums
    allow = tol_factor * (gap + 64 * np.finfo(float).eps * (np.abs(lhs_fd[sel]) + np.abs(rhs[sel])))
    margin = raw / scale
    tau = float(allow.max()) / scale
    bad = np.flatnonzero(raw < -allow)
    order = bad[np.argsort(margin[bad], kind="stable")][:max_violations]
    X_full = np.broadcast_to(XX, shape + (n,))
    tsel, xsel = t_full[sel], X_full[sel]
    violations = [{"t": float(tsel[i]), "x": tuple(float(v) for v in xsel[i]),
                   "margin": float(margin[i]), "deficit": float(-raw[i]),
                   "allowance": float(allow[i])} for i in order]
    num_bad = int(bad.size)
    return PointwiseResult(float(margin.min()), tau, violations, mode, grid.h, grid.dt, num_bad)
