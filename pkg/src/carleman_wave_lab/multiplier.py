"""Pointwise algebra of the weighted multiplier identity.

For the operator ``du_t - sum_ij (b^{ij} u_i)_j dt`` with a symmetric matrix
field b, a weight exponent l (theta = e^l) and an auxiliary function Psi, the
identity pairs the operator with ``M = -2 l_t v_t + 2 sum b^{ij} l_i v_j + Psi v``
(v = theta u) and rewrites the product as a time differential, a spatial
divergence and explicit quadratic forms in (v_t, grad v, v).

Every quantity here is evaluated from *jets*: arrays of exact derivatives of l,
Psi and b at the evaluation points.  Scalar fields have shape S, vectors
S + (n,), matrices S + (n, n) and so on; tensor indices are always trailing.

Since every term is quadratic in v, all functions below work with the
*reduced* state (v, v_t, grad v) / theta, i.e. u, u_t + l_t u, grad u + u grad l.
The true terms are the reduced ones times theta^2, which callers assemble in
log space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class WeightJet:
    l: np.ndarray
    lt: np.ndarray
    ltt: np.ndarray
    lttt: np.ndarray
    li: np.ndarray
    lti: np.ndarray
    ltti: np.ndarray
    lij: np.ndarray
    ltij: np.ndarray
    lijk: np.ndarray


@dataclass
class PsiJet:
    p: np.ndarray
    pt: np.ndarray
    ptt: np.ndarray
    pi: np.ndarray
    pij: np.ndarray


@dataclass
class MatrixJet:
    """b^{ij} and derivatives; ``bk[..., i, j, k]`` is d_k b^{ij}, ``bkl`` is d_k d_l b^{ij}."""

    b: np.ndarray
    bt: np.ndarray
    bk: np.ndarray
    btk: np.ndarray
    bkl: np.ndarray

    @property
    def div(self):
        # sum_j d_j b^{ij}
        return np.einsum("...ijj->...i", self.bk)

    @property
    def div_t(self):
        return np.einsum("...ijj->...i", self.btk)

    @property
    def div_k(self):
        # d_k sum_j d_j b^{ij}, indexed [..., i, k]
        return np.einsum("...ijjk->...ik", self.bkl)


@dataclass
class ReducedState:
    """(v, v_t, grad v) divided by theta."""

    v: np.ndarray
    vt: np.ndarray
    vi: np.ndarray


def reduce_field(u, ut, ui, w: WeightJet) -> ReducedState:
    return ReducedState(
        v=u,
        vt=ut + w.lt * u,
        vi=ui + w.li * np.asarray(u)[..., None],
    )


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def _quad(m, a, b):
    return np.einsum("...ij,...i,...j->...", m, a, b)


def A_general(w: WeightJet, p: PsiJet, b: MatrixJet):
    """A = (l_t^2 - l_tt) - sum_ij (b^{ij} l_i l_j - b^{ij}_j l_i - b^{ij} l_ij) - Psi."""
    inner = _quad(b.b, w.li, w.li) - _dot(b.div, w.li) - np.einsum("...ij,...ij->...", b.b, w.lij)
    return (w.lt**2 - w.ltt) - inner - p.p


def A_derivatives(w: WeightJet, p: PsiJet, b: MatrixJet):
    """Closed-form (A, A_t, grad A)."""
    A = A_general(w, p, b)
    At = (
        2 * w.lt * w.ltt
        - w.lttt
        - (
            _quad(b.bt, w.li, w.li)
            + 2 * _quad(b.b, w.lti, w.li)
            - _dot(b.div_t, w.li)
            - _dot(b.div, w.lti)
            - np.einsum("...ij,...ij->...", b.bt, w.lij)
            - np.einsum("...ij,...ij->...", b.b, w.ltij)
        )
        - p.pt
    )
    Ak = (
        2 * w.lt[..., None] * w.lti
        - w.ltti
        - (
            np.einsum("...ijk,...i,...j->...k", b.bk, w.li, w.li)
            + 2 * np.einsum("...ij,...ik,...j->...k", b.b, w.lij, w.li)
            - np.einsum("...ik,...i->...k", b.div_k, w.li)
            - np.einsum("...i,...ik->...k", b.div, w.lij)
            - np.einsum("...ijk,...ij->...k", b.bk, w.lij)
            - np.einsum("...ij,...ijk->...k", b.b, w.lijk)
        )
        - p.pi
    )
    return A, At, Ak


def B_general(w: WeightJet, p: PsiJet, b: MatrixJet):
    """B = A Psi + (A l_t)_t - sum_ij (A b^{ij} l_i)_j + (Psi_tt - sum_ij (b^{ij} Psi_i)_j) / 2."""
    A, At, Ak = A_derivatives(w, p, b)
    div_term = (
        np.einsum("...j,...ij,...i->...", Ak, b.b, w.li)
        + A * _dot(b.div, w.li)
        + A * np.einsum("...ij,...ij->...", b.b, w.lij)
    )
    psi_term = p.ptt - (_dot(b.div, p.pi) + np.einsum("...ij,...ij->...", b.b, p.pij))
    return A * p.p + (At * w.lt + A * w.ltt) - div_term + 0.5 * psi_term


@dataclass
class QuadraticCoefficients:
    """Coefficients of v_t^2, v_i v_t and v_i v_j on the right of the identity."""

    vtt: np.ndarray
    cross: np.ndarray
    Q: np.ndarray


def quadratic_coefficients(w: WeightJet, p: PsiJet, b: MatrixJet) -> QuadraticCoefficients:
    vtt = w.ltt + _dot(b.div, w.li) + np.einsum("...ij,...ij->...", b.b, w.lij) - p.p
    cross = -2 * (np.einsum("...ij,...j->...i", b.bt, w.li) + 2 * np.einsum("...ij,...j->...i", b.b, w.lti))
    bb = b.b
    Q = (
        b.bt * w.lt[..., None, None]
        + bb * w.ltt[..., None, None]
        + 2 * np.einsum("...iJ,...IjJ,...I->...ij", bb, b.bk, w.li)
        + 2 * np.einsum("...iJ,...Ij,...IJ->...ij", bb, bb, w.lij)
        - np.einsum("...ijJ,...IJ,...I->...ij", b.bk, bb, w.li)
        - bb * _dot(b.div, w.li)[..., None, None]
        - bb * np.einsum("...IJ,...IJ->...", bb, w.lij)[..., None, None]
        + p.p[..., None, None] * bb
    )
    return QuadraticCoefficients(vtt=vtt, cross=cross, Q=Q)


def multiplier(s: ReducedState, w: WeightJet, p: PsiJet, b: MatrixJet):
    """M / theta with M = -2 l_t v_t + 2 sum b^{ij} l_i v_j + Psi v."""
    return -2 * w.lt * s.vt + 2 * _quad(b.b, w.li, s.vi) + p.p * s.v


def rhs_parts(s: ReducedState, w: WeightJet, p: PsiJet, b: MatrixJet,
              A=None, B=None, coeffs: Optional[QuadraticCoefficients] = None):
    """Reduced right-hand side of the identity split into (quadratic forms, B v^2, M^2)."""
    if coeffs is None:
        coeffs = quadratic_coefficients(w, p, b)
    if B is None:
        B = B_general(w, p, b)
    forms = (
        coeffs.vtt * s.vt**2
        + _dot(coeffs.cross, s.vi) * s.vt
        + _quad(coeffs.Q, s.vi, s.vi)
    )
    M = multiplier(s, w, p, b)
    return forms, B * s.v**2, M**2


def time_flux(s: ReducedState, w: WeightJet, p: PsiJet, b: MatrixJet, A=None):
    """Reduced bracket under the time differential."""
    if A is None:
        A = A_general(w, p, b)
    bl = _quad(b.b, w.li, s.vi)
    return (
        w.lt * _quad(b.b, s.vi, s.vi)
        - 2 * bl * s.vt
        + w.lt * s.vt**2
        - p.p * s.vt * s.v
        + (A * w.lt + 0.5 * p.pt) * s.v**2
    )


def space_flux(s: ReducedState, w: WeightJet, p: PsiJet, b: MatrixJet, A=None):
    """Reduced divergence flux, indexed by the differentiated coordinate j."""
    if A is None:
        A = A_general(w, p, b)
    bl = _quad(b.b, w.li, s.vi)
    bvv = _quad(b.b, s.vi, s.vi)
    v = s.v[..., None]
    wi = (
        2 * bl[..., None] * s.vi
        - w.li * bvv[..., None]
        - 2 * w.lt[..., None] * s.vi * s.vt[..., None]
        + w.li * (s.vt**2)[..., None]
        + p.p[..., None] * s.vi * v
        - (A[..., None] * w.li + 0.5 * p.pi) * v**2
    )
    return np.einsum("...ij,...i->...j", b.b, wi)


def operator_term(s: ReducedState, utt, ui, uij, w: WeightJet, p: PsiJet, b: MatrixJet):
    """Reduced theta M [u_tt - sum_ij (b^{ij} u_i)_j]; the true term is theta^2 times this."""
    lap = _dot(b.div, ui) + np.einsum("...ij,...ij->...", b.b, uij)
    return multiplier(s, w, p, b) * (utt - lap)


# -- simple evaluators --------------------------------------------------------

def _zeros(shape, n, rank):
    return np.zeros(tuple(shape) + (n,) * rank)


class ConstantPsi:
    """Psi equal to a constant everywhere."""

    def __init__(self, value: float):
        self.value = float(value)

    def jet(self, t, x) -> PsiJet:
        S = np.broadcast_shapes(np.shape(t), np.shape(x)[:-1])
        n = np.shape(x)[-1]
        return PsiJet(
            p=np.full(S, self.value),
            pt=np.zeros(S),
            ptt=np.zeros(S),
            pi=_zeros(S, n, 1),
            pij=_zeros(S, n, 2),
        )


class IdentityMatrix:
    def __init__(self, n: int):
        self.n = n

    def jet(self, t, x) -> MatrixJet:
        S = np.broadcast_shapes(np.shape(t), np.shape(x)[:-1])
        n = self.n
        return MatrixJet(
            b=np.broadcast_to(np.eye(n), tuple(S) + (n, n)),
            bt=_zeros(S, n, 2),
            bk=_zeros(S, n, 3),
            btk=_zeros(S, n, 3),
            bkl=_zeros(S, n, 4),
        )


class ConstantMatrix:
    """A constant (possibly asymmetric, for validation tests) matrix field."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        self.n = self.matrix.shape[0]

    def jet(self, t, x) -> MatrixJet:
        S = np.broadcast_shapes(np.shape(t), np.shape(x)[:-1])
        n = self.n
        return MatrixJet(
            b=np.broadcast_to(self.matrix, tuple(S) + (n, n)),
            bt=_zeros(S, n, 2),
            bk=_zeros(S, n, 3),
            btk=_zeros(S, n, 3),
            bkl=_zeros(S, n, 4),
        )


class ScalarCoefficient1D:
    """b^{11}(t, x) = q(x) r(t) for 1-D problems, with q and r given as factors.

    ``space`` and ``time`` need ``value``, ``d1`` and ``d2`` methods (see
    :mod:`carleman_wave_lab.fields`).
    """

    n = 1

    def __init__(self, space, time=None):
        self.space = space
        self.time = time

    def jet(self, t, x) -> MatrixJet:
        xs = np.asarray(x)[..., 0]
        q, q1, q2 = self.space.value(xs), self.space.d1(xs), self.space.d2(xs)
        if self.time is None:
            r, r1 = np.ones_like(np.asarray(t, dtype=float)), np.zeros_like(np.asarray(t, dtype=float))
        else:
            r, r1 = self.time.value(t), self.time.d1(t)
        S = np.broadcast_shapes(np.shape(t), xs.shape)

        def m(a, rank):
            return np.broadcast_to(a, S).reshape(tuple(S) + (1,) * rank)

        return MatrixJet(
            b=m(q * r, 2),
            bt=m(q * r1, 2),
            bk=m(q1 * r, 3),
            btk=m(q1 * r1, 3),
            bkl=m(q2 * r, 4),
        )


def is_symmetric(b: MatrixJet, rtol=1e-12) -> bool:
    arrs = [b.b, b.bt]
    arrs += [np.moveaxis(b.bk, -1, 0), np.moveaxis(b.btk, -1, 0)]
    for a in arrs:
        if not np.allclose(a, np.swapaxes(a, -1, -2), rtol=rtol, atol=0.0):
            return False
    return True
