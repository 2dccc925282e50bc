"""Carleman weights, their coefficient functions and positivity certification.

The weight exponent is l(t, x) = lambda (|x - x0|^2 - c (t - T/2)^2) and the
singular time factor is Theta(t) = exp(-beta / (t (T - t))).  All derivatives
are hard-coded polynomials; nothing here differentiates numerically.

Points ``x`` carry the coordinate axis last, shape (..., n).  In one dimension
a plain array of coordinates is accepted as well.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from typing import Optional, Sequence

import numpy as np

from .errors import CertificationError, SaturationError, ValidationError
from .multiplier import (
    ConstantPsi,
    IdentityMatrix,
    B_general,
    WeightJet,
)

DEFAULT_EXP_CAP = 700.0


@dataclass(frozen=True)
class WeightParams:
    lam: float
    c: float
    beta: float
    T: float
    x0: tuple
    k: Optional[float] = None
    ell_shift: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        if self.k is None:
            object.__setattr__(self, "k", 1.0 - self.c)
        if not self.lam > 0:
            raise ValidationError(f"lambda={self.lam}: must be positive")
        if not self.beta > 0:
            raise ValidationError(f"beta={self.beta}: must be positive")
        if not 0 < self.c < 1:
            raise ValidationError(f"c={self.c}: must lie in (0, 1)")
        if not self.T > 0:
            raise ValidationError(f"T={self.T}: must be positive")

    def replace(self, **changes) -> "WeightParams":
        d = asdict(self)
        d.update(changes)
        return WeightParams(**d)

    def weight(self) -> "QuadraticWeight":
        return QuadraticWeight(self.lam, self.c, self.T, self.x0, self.ell_shift)

    def psi_field(self, n: int) -> ConstantPsi:
        return ConstantPsi(psi(self, n))


def as_points(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if n == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != n:
        raise ValidationError(f"points of shape {x.shape} are not in R^{n}")
    return x


def _rho2(x, x0):
    x0 = np.asarray(x0, dtype=float)
    d = as_points(x, len(x0)) - x0
    return np.einsum("...i,...i->...", d, d)


class QuadraticWeight:
    """Exact jet of l = lambda (|x - x0|^2 - c (t - T/2)^2) + shift.

    ``lam = 0`` gives the zero weight, which the identity checks use as a
    degenerate case.
    """

    def __init__(self, lam, c, T, x0, shift=0.0):
        self.lam, self.c, self.T, self.shift = float(lam), float(c), float(T), float(shift)
        self.x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        self.n = len(self.x0)

    def value(self, t, x):
        s = np.asarray(t, dtype=float) - self.T / 2
        return self.lam * (_rho2(x, self.x0) - self.c * s**2) + self.shift

    def jet(self, t, x) -> WeightJet:
        n, lam, c = self.n, self.lam, self.c
        x = as_points(x, n)
        t = np.asarray(t, dtype=float)
        S = np.broadcast_shapes(t.shape, x.shape[:-1])
        s = np.broadcast_to(t - self.T / 2, S)
        d = np.broadcast_to(x - self.x0, tuple(S) + (n,))
        z0 = np.zeros(S)
        z1 = np.zeros(tuple(S) + (n,))
        return WeightJet(
            l=self.value(t, x) + z0,
            lt=-2 * lam * c * s,
            ltt=np.full(S, -2 * lam * c),
            lttt=z0,
            li=2 * lam * d,
            lti=z1,
            ltti=z1,
            lij=np.broadcast_to(2 * lam * np.eye(n), tuple(S) + (n, n)),
            ltij=np.zeros(tuple(S) + (n, n)),
            lijk=np.zeros(tuple(S) + (n, n, n)),
        )


# -- weight functions --------------------------------------------------------

def ell(t, x, p: WeightParams):
    return p.weight().value(t, x)


def ell_t(t, x, p: WeightParams):
    t = np.asarray(t, dtype=float)
    return -2 * p.lam * p.c * (t - p.T / 2) + 0 * _rho2(x, p.x0)


def grad_ell(t, x, p: WeightParams):
    x = as_points(x, len(p.x0))
    return 2 * p.lam * (x - np.array(p.x0)) + 0 * np.asarray(t, dtype=float)[..., None]


def theta_sq_log(t, x, p: WeightParams, cap: float = DEFAULT_EXP_CAP):
    """log(theta^2) = 2 l, guarded by the saturation cap."""
    L = 2 * ell(t, x, p)
    check_cap(L, t, x, p, cap)
    return L


def log_Theta(t, p: WeightParams):
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > p.T)):
        raise ValidationError(f"Theta is defined on [0, {p.T}] only")
    with np.errstate(divide="ignore"):
        inside = (t > 0) & (t < p.T)
        out = np.full(t.shape, -np.inf)
        tt = t[inside]
        out[inside] = -p.beta / (tt * (p.T - tt))
    return out if out.ndim else float(out)


def Theta(t, p: WeightParams):
    """exp(-beta / (t (T - t))) on (0, T), exactly 0 at t = 0 and t = T."""
    return np.exp(log_Theta(t, p))


def check_cap(L, t, x, p, cap=DEFAULT_EXP_CAP):
    L = np.asarray(L)
    if L.size and np.nanmax(L) > cap:
        i = np.unravel_index(np.nanargmax(L), L.shape)
        tt = np.broadcast_to(np.asarray(t, dtype=float), L.shape)[i] if np.ndim(t) else float(t)
        xb = _point_at(x, L.shape, i, len(p.x0) if p is not None else 1)
        lam = p.lam if p is not None else float("nan")
        raise SaturationError(
            f"log weight {float(L[i]):.6g} exceeds cap {cap} at t={tt!r}, x={xb}, lambda={lam}"
        )


def _point_at(x, shape, i, n):
    try:
        xp = as_points(x, n)
        xp = np.broadcast_to(xp, tuple(shape) + (n,))
        return tuple(float(v) for v in xp[i])
    except Exception:
        return "?"


def weighted_exp(log_terms, cap: float = DEFAULT_EXP_CAP, t=None, x=None, p=None):
    """Exponentiate a sum of log-space factors once, refusing to overflow."""
    L = np.asarray(log_terms, dtype=float)
    check_cap(L, t if t is not None else np.nan, x if x is not None else np.zeros(L.shape + (1,)), p, cap)
    return np.exp(L)


def Theta_theta_sq(t, x, p: WeightParams, cap: float = DEFAULT_EXP_CAP):
    """Theta * theta^2 assembled in log space."""
    L = log_Theta(t, p) + 2 * ell(t, x, p)
    return weighted_exp(L, cap, t, x, p)


# -- coefficient functions ---------------------------------------------------

def psi(p: WeightParams, n: int) -> float:
    return (2 * n - 2 * p.c - 1 + p.k) * p.lam


def A_coeff(t, x, p: WeightParams, n: Optional[int] = None):
    """A = 4 [c^2 (t - T/2)^2 - |x - x0|^2] lambda^2 + lambda (4c + 1 - k)."""
    s = np.asarray(t, dtype=float) - p.T / 2
    return 4 * (p.c**2 * s**2 - _rho2(x, p.x0)) * p.lam**2 + p.lam * (4 * p.c + 1 - p.k)


def B_leading(t, x, p: WeightParams):
    s = np.asarray(t, dtype=float) - p.T / 2
    c, k = p.c, p.k
    return 4 * ((4 * c + 5 - k) * _rho2(x, p.x0) - (8 * c + 1 - k) * c**2 * s**2) * p.lam**3


def B_exact(t, x, p: WeightParams, n: int):
    """B from its general definition with b = I, evaluated from exact jets."""
    x = as_points(x, n)
    w = p.weight().jet(t, x)
    return B_general(w, p.psi_field(n).jet(t, x), IdentityMatrix(n).jet(t, x))


def B_coeff(t, x, p: WeightParams, n: int):
    """(leading lambda^3 part, exact remainder)."""
    lead = B_leading(t, x, p)
    return lead, B_exact(t, x, p, n) - lead


@dataclass
class FGSplit:
    F1_0: np.ndarray
    F1_1: np.ndarray
    F2_0: np.ndarray
    F2_1: np.ndarray
    G_0: np.ndarray
    G_1: np.ndarray

    @property
    def F1(self):
        return self.F1_0 + self.F1_1

    @property
    def F2(self):
        return self.F2_0 + self.F2_1

    @property
    def G(self):
        return self.G_0 + self.G_1


def _fg_from_rho(t, rho, p: WeightParams, n: int, inv_lam: Optional[float] = None) -> FGSplit:
    """Splits as functions of (t, |x - x0|).  ``inv_lam=0`` gives the lambda -> infinity limit."""
    t = np.asarray(t, dtype=float)
    if np.any((t <= 0) | (t >= p.T)):
        raise ValidationError(f"F and G are only defined for t in (0, {p.T})")
    rho = np.asarray(rho, dtype=float)
    c, k, T, beta = p.c, p.k, p.T, p.beta
    il = 1.0 / p.lam if inv_lam is None else inv_lam
    s = t - T / 2
    gap = np.abs(T - 2 * t)
    sig = beta / (t**2 * (T - t) ** 2)
    kappa = 4 * c + 1 - k
    psi_unit = 2 * n - 2 * c - 1 + k
    rho2 = rho**2
    shape = np.broadcast_shapes(t.shape, rho.shape)
    b = lambda a: np.broadcast_to(a, shape)
    F1_0 = b(np.full(shape, 1 - k))
    F1_1 = b(sig * gap * (c * gap - (2 * rho + il)))
    F2_0 = b(np.full(shape, k + 3 - 4 * c))
    F2_1 = b(sig * gap * (c * gap - 2 * rho))
    # B / lambda^3 = leading + exact remainder (-kappa^2 / lambda)
    G_0 = b(4 * ((4 * c + 5 - k) * rho2 - (8 * c + 1 - k) * c**2 * s**2) - kappa**2 * il)
    # Theta'/Theta * l_t * A / lambda^3 and the Psi^2 / 4 term from the Cauchy bound
    G_1 = b(sig * gap * (4 * c * gap * (c**2 * s**2 - rho2) + il * (c * gap * kappa - psi_unit**2 / 4)))
    return FGSplit(F1_0, F1_1, F2_0, F2_1, G_0, G_1)


def F_and_G(t, x, p: WeightParams, n: int) -> FGSplit:
    return _fg_from_rho(t, np.sqrt(_rho2(x, p.x0)), p, n)


# -- certification -----------------------------------------------------------

def beta_ladder(T: float, exponents=range(1, 7)):
    return [10.0 ** (-m) * T**2 / 4 for m in exponents]


def lambda_ladder(max_power: int = 20):
    return [2.0**j for j in range(max_power + 1)]


def c0_from_minima(min_F1, min_F2, min_G, c, T, R1):
    """Constant making the F/G lower bound dominate the u-variable energy density.

    Uses theta^2 (u_t^2 + |grad u|^2 + lambda^2 u^2)
        <= 2 v_t^2 + 2 |grad v|^2 + lambda^2 (2 c^2 T^2 + 8 R1^2 + 1) v^2.
    """
    return min(min_F1 / 2, min_F2 / 2, min_G / (2 * c**2 * T**2 + 8 * R1**2 + 1))


@dataclass
class PositivityCertificate:
    k: float
    lambda0: float
    beta0: float
    delta0: float
    min_F1: float
    min_F2: float
    min_G: float
    c0: float
    resolution: tuple
    c: float
    T: float
    n: int
    R0: float
    R1: float
    beta_ladder_value: float = 0.0
    recheck: dict = field(default_factory=dict)

    def as_dict(self):
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["resolution"] = tuple(d["resolution"])
        return cls(**d)


def lattice(T, R0, R1, nt, nr):
    """Open-interval time nodes times closed radius nodes."""
    t = T * np.arange(1, nt + 1) / (nt + 1)
    r = np.linspace(R0, R1, nr)
    return np.meshgrid(t, r, indexing="ij")


def _minima(split: FGSplit):
    return float(split.F1.min()), float(split.F2.min()), float(split.G.min())


def _delta0(split: FGSplit, tt, T):
    """Largest lattice delta with all singular parts positive on (0, delta] and [T - delta, T)."""
    ok = (split.F1_1 > 0).all(axis=1) & (split.F2_1 > 0).all(axis=1) & (split.G_1 > 0).all(axis=1)
    t = tt[:, 0]
    best = 0.0
    order = np.argsort(np.minimum(t, T - t), kind="stable")
    dist = np.minimum(t, T - t)[order]
    good = ok[order]
    for i in range(len(order)):
        if not good[i]:
            break
        # every node at distance <= dist[i] from the ends has been accepted
        if i + 1 == len(order) or dist[i + 1] > dist[i]:
            best = float(dist[i])
    return min(best, np.nextafter(T / 2, 0.0))


def _violations(split: FGSplit, tt, rr, limit=20):
    bad = (split.F1 <= 0) | (split.F2 <= 0) | (split.G <= 0)
    idx = np.argwhere(bad)[:limit]
    out = []
    for i, j in idx:
        out.append({
            "t": float(tt[i, j]),
            "rho": float(rr[i, j]),
            "F1": float(split.F1[i, j]),
            "F2": float(split.F2[i, j]),
            "G": float(split.G[i, j]),
        })
    return out


def evaluate_lattice(geom, p: WeightParams, nt: int, nr: int, inv_lam=None):
    tt, rr = lattice(p.T, geom.R0, geom.R1, nt, nr)
    return tt, rr, _fg_from_rho(tt, rr, p, geom.n, inv_lam)


def certify_positivity(geom, p: WeightParams, resolution=(200, 200),
                       betas: Optional[Sequence[float]] = None,
                       lambdas: Optional[Sequence[float]] = None) -> PositivityCertificate:
    """Search the beta and lambda ladders for strictly positive F1, F2 and G.

    beta runs from large to small (outer loop), lambda from small to large.
    Positivity is required both at lambda0 and in the lambda -> infinity
    limit; every split is affine in 1/lambda and beta, so this covers all
    lambda >= lambda0 and beta in (0, beta0].
    """
    nt, nr = resolution
    betas = beta_ladder(p.T) if betas is None else list(betas)
    lambdas = lambda_ladder() if lambdas is None else list(lambdas)
    last_split = None
    for m, beta in enumerate(betas):
        q = p.replace(beta=beta)
        tt, rr, limit = evaluate_lattice(geom, q, nt, nr, inv_lam=0.0)
        lim_min = _minima(limit)
        if min(lim_min) <= 0:
            last_split = limit
            continue
        for lam in lambdas:
            q = p.replace(beta=beta, lam=lam)
            _, _, split = evaluate_lattice(geom, q, nt, nr)
            mins = _minima(split)
            last_split = split
            if min(mins) <= 0:
                continue
            nonsing = (split.G_0.min() > 0 and split.F1_0.min() > 0 and split.F2_0.min() > 0)
            delta0 = _delta0(split, tt, p.T)
            if not nonsing or delta0 <= 0:
                continue
            mF1, mF2, mG = (min(a, b) for a, b in zip(mins, lim_min))
            return PositivityCertificate(
                k=p.k, lambda0=lam, beta0=beta, delta0=delta0,
                min_F1=mF1, min_F2=mF2, min_G=mG,
                c0=c0_from_minima(mF1, mF2, mG, p.c, p.T, geom.R1),
                resolution=(nt, nr), c=p.c, T=p.T, n=geom.n,
                R0=geom.R0, R1=geom.R1,
                beta_ladder_value=beta * 4 / p.T**2,
            )
    violations = _violations(last_split, tt, rr) if last_split is not None else []
    raise CertificationError(
        f"no (beta, lambda) on the ladders gives positive F1, F2, G for T={p.T}, c={p.c}, k={p.k}",
        violations,
    )


def recheck_certificate(cert: PositivityCertificate, geom, p: WeightParams, resolution=(2000, 2000)):
    """Re-evaluate the minima on a finer lattice at (beta0, lambda0) and lambda -> infinity."""
    q = p.replace(beta=cert.beta0, lam=cert.lambda0, k=cert.k)
    nt, nr = resolution
    _, _, split = evaluate_lattice(geom, q, nt, nr)
    a = _minima(split)
    _, _, limit = evaluate_lattice(geom, q, nt, nr, inv_lam=0.0)
    b = _minima(limit)
    out = {
        "resolution": [nt, nr],
        "min_F1": min(a[0], b[0]),
        "min_F2": min(a[1], b[1]),
        "min_G": min(a[2], b[2]),
    }
    out["positive"] = bool(min(out["min_F1"], out["min_F2"], out["min_G"]) > 0)
    cert.recheck = out
    return out
