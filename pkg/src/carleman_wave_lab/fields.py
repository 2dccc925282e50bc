"""Closed-form manufactured fields with hand-coded derivatives.

A field is a sum of separable terms ``tau(t) * prod_k X_k(x_k)`` where every
factor is a one-variable function carrying its first and second derivative.
That is enough for ``u, u_t, u_tt, grad u, hess u``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

Interval = Optional[Tuple[float, float]]
# support of the zero function; behaves correctly under min/max
EMPTY = (math.inf, -math.inf)


class Factor:
    """One-variable function with exact first and second derivatives."""

    support: Interval = None

    def value(self, s):
        raise NotImplementedError

    def d1(self, s):
        raise NotImplementedError

    def d2(self, s):
        raise NotImplementedError

    def __mul__(self, other):
        return Product(self, _as_factor(other))

    __rmul__ = __mul__

    def __add__(self, other):
        return Sum(self, _as_factor(other))

    __radd__ = __add__

    def __neg__(self):
        return Product(Const(-1.0), self)


def _as_factor(f):
    return f if isinstance(f, Factor) else Const(float(f))


def _intersect(a: Interval, b: Interval) -> Interval:
    if a is None:
        return b
    if b is None:
        return a
    return (max(a[0], b[0]), min(a[1], b[1]))


def _hull(a: Interval, b: Interval) -> Interval:
    if a is None or b is None:
        return None
    if a == EMPTY or b == EMPTY:
        return b if a == EMPTY else a
    return (min(a[0], b[0]), max(a[1], b[1]))


@dataclass(frozen=True)
class Const(Factor):
    c: float

    @property
    def support(self):
        return None if self.c else EMPTY

    def value(self, s):
        return np.full(np.shape(s), self.c)

    def d1(self, s):
        return np.zeros(np.shape(s))

    def d2(self, s):
        return np.zeros(np.shape(s))


@dataclass(frozen=True)
class Sin(Factor):
    """sin(w s + phase)."""

    w: float = 1.0
    phase: float = 0.0

    def value(self, s):
        return np.sin(self.w * np.asarray(s) + self.phase)

    def d1(self, s):
        return self.w * np.cos(self.w * np.asarray(s) + self.phase)

    def d2(self, s):
        return -self.w**2 * np.sin(self.w * np.asarray(s) + self.phase)


def Cos(w: float = 1.0, phase: float = 0.0) -> Sin:
    return Sin(w, phase + math.pi / 2)


@dataclass(frozen=True)
class Poly(Factor):
    """Polynomial with coefficients in increasing degree."""

    coeffs: Tuple[float, ...]

    def _eval(self, c, s):
        return np.polynomial.polynomial.polyval(np.asarray(s, dtype=float), c) if len(c) else np.zeros(np.shape(s))

    def value(self, s):
        return self._eval(self.coeffs, s)

    def d1(self, s):
        return self._eval(np.polynomial.polynomial.polyder(self.coeffs), s)

    def d2(self, s):
        return self._eval(np.polynomial.polynomial.polyder(self.coeffs, 2), s)


@dataclass(frozen=True)
class Bump(Factor):
    """(1 - z^2)^p on |z| < 1 with z = (2 s - a - b)/(b - a), zero outside; C^{p-1}."""

    a: float
    b: float
    p: int = 6

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError(f"bump support ({self.a}, {self.b}) is empty")
        if self.p < 3:
            raise ValueError(f"bump power p={self.p} must be >= 3 for a C^2 cutoff")

    @property
    def support(self):
        return (self.a, self.b)

    def _z(self, s):
        s = np.asarray(s, dtype=float)
        k = 2.0 / (self.b - self.a)
        z = k * s - (self.a + self.b) / (self.b - self.a)
        # exact zeros on and outside the support end points
        q = np.where((s > self.a) & (s < self.b), np.clip((1 - z) * (1 + z), 0.0, None), 0.0)
        return z, k, q

    def value(self, s):
        _, _, q = self._z(s)
        return q**self.p

    def d1(self, s):
        z, k, q = self._z(s)
        return k * self.p * q ** (self.p - 1) * (-2 * z)

    def d2(self, s):
        z, k, q = self._z(s)
        p = self.p
        return k**2 * (p * (p - 1) * q ** (p - 2) * 4 * z**2 - 2 * p * q ** (p - 1))


@dataclass(frozen=True)
class Product(Factor):
    f: Factor
    g: Factor

    @property
    def support(self):
        return _intersect(self.f.support, self.g.support)

    def value(self, s):
        return self.f.value(s) * self.g.value(s)

    def d1(self, s):
        return self.f.d1(s) * self.g.value(s) + self.f.value(s) * self.g.d1(s)

    def d2(self, s):
        f, g = self.f, self.g
        return f.d2(s) * g.value(s) + 2 * f.d1(s) * g.d1(s) + f.value(s) * g.d2(s)


@dataclass(frozen=True)
class Sum(Factor):
    f: Factor
    g: Factor

    @property
    def support(self):
        return _hull(self.f.support, self.g.support)

    def value(self, s):
        return self.f.value(s) + self.g.value(s)

    def d1(self, s):
        return self.f.d1(s) + self.g.d1(s)

    def d2(self, s):
        return self.f.d2(s) + self.g.d2(s)


@dataclass
class FieldJet:
    u: np.ndarray
    ut: np.ndarray
    utt: np.ndarray
    ui: np.ndarray
    uij: np.ndarray


@dataclass(frozen=True)
class SeparableField:
    """u(t, x) = tau(t) * prod_k X_k(x_k)."""

    time: Factor
    space: Tuple[Factor, ...]

    @property
    def n(self):
        return len(self.space)

    def time_support(self) -> Interval:
        return self.time.support

    def space_support(self):
        return [f.support for f in self.space]

    def jet(self, t, x) -> FieldJet:
        x = np.asarray(x, dtype=float)
        n = self.n
        S = np.broadcast_shapes(np.shape(t), x.shape[:-1])
        T0, T1, T2 = self.time.value(t), self.time.d1(t), self.time.d2(t)
        X0 = [f.value(x[..., k]) for k, f in enumerate(self.space)]
        X1 = [f.d1(x[..., k]) for k, f in enumerate(self.space)]
        X2 = [f.d2(x[..., k]) for k, f in enumerate(self.space)]

        def prod(sel):
            out = np.ones(S)
            for k in range(n):
                out = out * sel[k]
            return out

        P = prod(X0)
        ui = np.zeros(S + (n,))
        uij = np.zeros(S + (n, n))
        for i in range(n):
            ui[..., i] = T0 * prod([X1[k] if k == i else X0[k] for k in range(n)])
            for j in range(n):
                if i == j:
                    sel = [X2[k] if k == i else X0[k] for k in range(n)]
                else:
                    sel = [X1[k] if k in (i, j) else X0[k] for k in range(n)]
                uij[..., i, j] = T0 * prod(sel)
        return FieldJet(
            u=np.broadcast_to(T0 * P, S).copy(),
            ut=np.broadcast_to(T1 * P, S).copy(),
            utt=np.broadcast_to(T2 * P, S).copy(),
            ui=ui,
            uij=uij,
        )


@dataclass(frozen=True)
class FieldSum:
    terms: Tuple[SeparableField, ...]

    @property
    def n(self):
        return self.terms[0].n

    def time_support(self) -> Interval:
        out = self.terms[0].time_support()
        for f in self.terms[1:]:
            out = _hull(out, f.time_support())
        return out

    def space_support(self):
        out = self.terms[0].space_support()
        for f in self.terms[1:]:
            out = [_hull(a, b) for a, b in zip(out, f.space_support())]
        return out

    def jet(self, t, x) -> FieldJet:
        jets = [f.jet(t, x) for f in self.terms]
        return FieldJet(*(sum(getattr(j, k) for j in jets) for k in ("u", "ut", "utt", "ui", "uij")))


def zero_field(n: int) -> SeparableField:
    return SeparableField(Const(0.0), tuple(Const(1.0) for _ in range(n)))


def sin_sin_field(n: int = 1, omega: float = math.pi, offset: float = 0.0) -> SeparableField:
    """sin(omega (x_k - offset)) per axis times sin(t)."""
    return SeparableField(Sin(1.0), tuple(Sin(omega, -omega * offset) for _ in range(n)))


def with_cutoff(field: SeparableField, time_support: Tuple[float, float],
                space_support: Sequence[Tuple[float, float]], p: int = 6) -> SeparableField:
    """Multiply each factor by a bump so the field is compactly supported."""
    return SeparableField(
        field.time * Bump(*time_support, p=p),
        tuple(f * Bump(a, b, p=p) for f, (a, b) in zip(field.space, space_support)),
    )
