"""INI experiment configuration: parsing, defaults, validation and builders.

Expressions (coefficients, initial data, manufactured fields, b^{ij}) are
parsed with sympy in the variables ``t``, ``x`` (alias of ``x1``) and ``x2``;
derivatives needed by the identity checks are taken symbolically.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import sympy as sp

from .errors import ValidationError
from .fields import Bump, FieldJet, SeparableField
from .geometry import DomainSpec, select_c, radii
from .multiplier import MatrixJet
from .spde_sim import CoefficientSet, DEFAULT_CFL, Grid, InitialData
from .weights import WeightParams

COMMANDS = ("verify-identity", "certify-weights", "simulate", "carleman", "observability", "sweep")

# section -> key -> default (strings, as they would appear in the file)
DEFAULTS: Dict[str, Dict[str, str]] = {
    "run": {"command": "", "seed": "0", "num_paths": "100", "batch_size": "0", "dump_paths": "0"},
    "domain": {"shape": "interval", "lower": "0", "upper": "1", "center": "", "radius": "",
               "x0": "-0.5", "h": "0.03125"},
    "weights": {"c": "midpoint", "T": "", "lambda": "auto", "beta": "auto", "k": "",
                "ell_shift": "0", "C_user": "1", "resolution": "200, 200",
                "recheck_resolution": "2000, 2000"},
    "grid": {"cfl": str(DEFAULT_CFL), "dt": "", "dt_ratio": ""},
    "coefficients": {"a1": "0", "a2": "0", "a3": "0", "a4": "0", "f": "0", "g": "0"},
    "initial": {"y0": "0", "y1": "0"},
    "identity": {"mode": "deterministic", "field": "sin(pi*x)*sin(t)", "b": "identity",
                 "cutoff_t": "", "cutoff_x": "", "cutoff_power": "6", "ladder": "1/32, 1/64, 1/128",
                 "min_order": "1.8", "phi": "sin(pi*x)", "horizon": "1", "dt": "0.001",
                 "include_ito": "true", "z_max": "3"},
    "sweep": {"command": "", "parameter": "", "values": ""},
}

SYMBOLS = {"t": sp.Symbol("t"), "x": sp.Symbol("x1"), "x1": sp.Symbol("x1"), "x2": sp.Symbol("x2")}


def _parse_expr(text: str, where: str):
    try:
        return sp.sympify(text, locals=dict(SYMBOLS, pi=sp.pi, e=sp.E))
    except (sp.SympifyError, SyntaxError, TypeError) as exc:
        raise ValidationError(f"{where}: cannot parse expression {text!r} ({exc})") from None


def _floats(text: str, where: str) -> List[float]:
    out = []
    for part in text.replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue
        try:
            out.append(float(sp.Rational(part)) if "/" in part else float(part))
        except (ValueError, TypeError):
            raise ValidationError(f"{where}: {part!r} is not a number") from None
    return out


def _float(text: str, where: str) -> float:
    vals = _floats(text, where)
    if len(vals) != 1:
        raise ValidationError(f"{where}: expected one number, got {text!r}")
    return vals[0]


class ExpressionCoefficient:
    """Callable (t, X) -> array from a sympy expression."""

    def __init__(self, expr, n):
        self.expr = expr
        self.n = n
        args = [SYMBOLS["t"], SYMBOLS["x1"], SYMBOLS["x2"]]
        self._f = sp.lambdify(args, expr, modules="numpy")

    @property
    def is_zero(self):
        return self.expr == 0

    def __call__(self, t, X):
        X = np.asarray(X, dtype=float)
        x1 = X[..., 0]
        x2 = X[..., 1] if self.n > 1 else np.zeros_like(x1)
        val = self._f(t, x1, x2)
        return np.broadcast_to(np.asarray(val, dtype=float), np.broadcast_shapes(np.shape(t), x1.shape))


def _jet_fn(expr):
    return sp.lambdify([SYMBOLS["t"], SYMBOLS["x1"], SYMBOLS["x2"]], expr, modules="numpy")


class ExpressionField:
    """Manufactured field from an expression, exact derivatives through sympy."""

    def __init__(self, expr, n):
        self.n = n
        t = SYMBOLS["t"]
        xs = [SYMBOLS["x1"], SYMBOLS["x2"]][:n]
        self.zero = expr == 0
        self._u = _jet_fn(expr)
        self._ut = _jet_fn(sp.diff(expr, t))
        self._utt = _jet_fn(sp.diff(expr, t, 2))
        self._ui = [_jet_fn(sp.diff(expr, xi)) for xi in xs]
        self._uij = [[_jet_fn(sp.diff(expr, xi, xj)) for xj in xs] for xi in xs]

    def time_support(self):
        from .fields import EMPTY
        return EMPTY if self.zero else None

    def space_support(self):
        from .fields import EMPTY
        return [EMPTY if self.zero else None] * self.n

    def jet(self, t, x) -> FieldJet:
        x = np.asarray(x, dtype=float)
        S = np.broadcast_shapes(np.shape(t), x.shape[:-1])
        x1 = x[..., 0]
        x2 = x[..., 1] if self.n > 1 else np.zeros_like(x1)

        def ev(f):
            return np.broadcast_to(np.asarray(f(t, x1, x2), dtype=float), S)

        n = self.n
        ui = np.stack([ev(f) for f in self._ui], axis=-1)
        uij = np.stack([np.stack([ev(f) for f in row], axis=-1) for row in self._uij], axis=-2)
        return FieldJet(ev(self._u).copy(), ev(self._ut).copy(), ev(self._utt).copy(), ui, uij.reshape(S + (n, n)))


class CutoffField:
    """base * chi with chi a separable bump; derivatives by the Leibniz rule."""

    def __init__(self, base, time_support, space_support, p=6):
        self.base = base
        self.n = base.n
        self.chi = SeparableField(Bump(*time_support, p=p), tuple(Bump(a, b, p=p) for a, b in space_support))

    def time_support(self):
        from .fields import EMPTY
        return EMPTY if getattr(self.base, "zero", False) else self.chi.time_support()

    def space_support(self):
        from .fields import EMPTY
        if getattr(self.base, "zero", False):
            return [EMPTY] * self.n
        return self.chi.space_support()

    def jet(self, t, x) -> FieldJet:
        a = self.base.jet(t, x)
        c = self.chi.jet(t, x)
        # chi_t and chi_ti are needed for u_t; chi is separable: chi_ti = tau'/tau * chi_i
        ct = c.ut
        u = a.u * c.u
        ut = a.ut * c.u + a.u * ct
        utt = a.utt * c.u + 2 * a.ut * ct + a.u * c.utt
        ui = a.ui * c.u[..., None] + a.u[..., None] * c.ui
        uij = (a.uij * c.u[..., None, None] + a.ui[..., :, None] * c.ui[..., None, :]
               + c.ui[..., :, None] * a.ui[..., None, :] + a.u[..., None, None] * c.uij)
        return FieldJet(u, ut, utt, ui, uij)


class ExpressionMatrix:
    """Symmetric-or-not matrix field b^{ij}(t, x) from expressions; exact jets."""

    def __init__(self, entries, n):
        self.n = n
        t = SYMBOLS["t"]
        xs = [SYMBOLS["x1"], SYMBOLS["x2"]][:n]
        self._b = [[_jet_fn(entries[i][j]) for j in range(n)] for i in range(n)]
        self._bt = [[_jet_fn(sp.diff(entries[i][j], t)) for j in range(n)] for i in range(n)]
        self._bk = [[[_jet_fn(sp.diff(entries[i][j], xk)) for xk in xs] for j in range(n)] for i in range(n)]
        self._btk = [[[_jet_fn(sp.diff(entries[i][j], t, xk)) for xk in xs] for j in range(n)] for i in range(n)]
        self._bkl = [[[[_jet_fn(sp.diff(entries[i][j], xk, xl)) for xl in xs] for xk in xs]
                      for j in range(n)] for i in range(n)]

    def jet(self, t, x) -> MatrixJet:
        x = np.asarray(x, dtype=float)
        S = np.broadcast_shapes(np.shape(t), x.shape[:-1])
        x1 = x[..., 0]
        x2 = x[..., 1] if self.n > 1 else np.zeros_like(x1)

        def ev(f):
            return np.broadcast_to(np.asarray(f(t, x1, x2), dtype=float), S)

        def build(tree):
            # outer list index first, directly after the point axes
            if callable(tree):
                return ev(tree)
            return np.stack([build(b) for b in tree], axis=len(S))

        return MatrixJet(build(self._b), build(self._bt), build(self._bk), build(self._btk), build(self._bkl))


@dataclass
class ExperimentConfig:
    """Resolved configuration: every key present, with defaults filled in."""

    values: Dict[str, Dict[str, str]]

    def get(self, section, key) -> str:
        return self.values[section][key]

    def set(self, section, key, value):
        if section not in self.values or key not in self.values[section]:
            raise ValidationError(f"unknown configuration key [{section}] {key}")
        self.values[section][key] = str(value)

    @property
    def command(self) -> str:
        return self.get("run", "command")

    @property
    def seed(self) -> int:
        try:
            return int(self.get("run", "seed"))
        except ValueError:
            raise ValidationError(f"[run] seed={self.get('run', 'seed')!r} is not an integer") from None

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec in DEFAULTS:
            cp[sec] = {k: self.values[sec][k] for k in DEFAULTS[sec]}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig({s: dict(v) for s, v in self.values.items()})

    def flat(self) -> Dict[str, str]:
        return {f"{s}.{k}": self.values[s][k] for s in DEFAULTS for k in DEFAULTS[s]}

    # -- builders ------------------------------------------------------------

    def int_(self, section, key) -> int:
        try:
            return int(float(self.get(section, key)))
        except ValueError:
            raise ValidationError(f"[{section}] {key}={self.get(section, key)!r} is not an integer") from None

    def float_(self, section, key) -> float:
        return _float(self.get(section, key), f"[{section}] {key}")

    def domain(self) -> DomainSpec:
        shape = self.get("domain", "shape")
        x0 = _floats(self.get("domain", "x0"), "[domain] x0")
        h = self.float_("domain", "h")
        if shape == "interval":
            return DomainSpec.interval(self.float_("domain", "lower"), self.float_("domain", "upper"), x0[0], h)
        if shape == "rectangle":
            return DomainSpec.rectangle(_floats(self.get("domain", "lower"), "[domain] lower"),
                                        _floats(self.get("domain", "upper"), "[domain] upper"), x0, h)
        if shape == "disk":
            return DomainSpec.disk(_floats(self.get("domain", "center"), "[domain] center"),
                                   self.float_("domain", "radius"), x0, h)
        raise ValidationError(f"[domain] shape={shape!r}: expected interval, rectangle or disk")

    def domain_with_h(self, h) -> DomainSpec:
        c = self.copy()
        c.set("domain", "h", repr(float(h)))
        return c.domain()

    def c_value(self, dom: DomainSpec) -> float:
        R0, R1 = radii(dom)
        text = self.get("weights", "c").strip()
        try:
            strategy = float(text)
        except ValueError:
            strategy = text
        return select_c(R0, R1, strategy)

    def T(self) -> float:
        if not self.get("weights", "T").strip():
            raise ValidationError("[weights] T is required")
        return self.float_("weights", "T")

    def weight_params(self, dom: DomainSpec, lam=None, beta=None, k=None) -> WeightParams:
        c = self.c_value(dom)
        ktext = self.get("weights", "k").strip()
        kval = k if k is not None else (float(ktext) if ktext else None)
        lam_text = self.get("weights", "lambda").strip()
        beta_text = self.get("weights", "beta").strip()
        lam = lam if lam is not None else (1.0 if lam_text == "auto" else self.float_("weights", "lambda"))
        beta = beta if beta is not None else (1.0 if beta_text == "auto" else self.float_("weights", "beta"))
        return WeightParams(lam=lam, c=c, beta=beta, T=self.T(), x0=dom.x0, k=kval,
                            ell_shift=self.float_("weights", "ell_shift"))

    def resolution(self, key) -> Tuple[int, int]:
        vals = _floats(self.get("weights", key), f"[weights] {key}")
        if len(vals) != 2 or min(vals) < 2:
            raise ValidationError(f"[weights] {key} must be two integers >= 2")
        return int(vals[0]), int(vals[1])

    def grid(self, dom: DomainSpec, T: float) -> Grid:
        if self.get("grid", "dt").strip():
            return Grid.from_dt(dom, T, self.float_("grid", "dt"))
        if self.get("grid", "dt_ratio").strip():
            return Grid.from_dt(dom, T, self.float_("grid", "dt_ratio") * dom.h)
        return Grid.from_cfl(dom, T, self.float_("grid", "cfl"))

    def coefficients(self, n: int) -> CoefficientSet:
        vals = {}
        for name in ("a1", "a3", "a4", "f", "g"):
            expr = _parse_expr(self.get("coefficients", name), f"[coefficients] {name}")
            if expr.is_number:
                vals[name] = float(expr)
            else:
                vals[name] = ExpressionCoefficient(expr, n)
        parts = [p.strip() for p in self.get("coefficients", "a2").split(",")]
        if len(parts) == 1 and n > 1:
            parts = parts * n
        if len(parts) != n:
            raise ValidationError(f"[coefficients] a2 needs {n} components")
        exprs = [_parse_expr(p, "[coefficients] a2") for p in parts]
        if all(e.is_number for e in exprs):
            vals["a2"] = np.array([float(e) for e in exprs]) if any(exprs) else 0.0
        else:
            comps = [ExpressionCoefficient(e, n) for e in exprs]
            vals["a2"] = lambda t, X, comps=comps: np.stack([c(t, X) for c in comps], axis=-1)
        return CoefficientSet(**vals)

    def initial(self, n: int) -> InitialData:
        out = []
        for name in ("y0", "y1"):
            expr = _parse_expr(self.get("initial", name), f"[initial] {name}")
            ev = ExpressionCoefficient(expr, n)
            out.append(lambda X, ev=ev: ev(0.0, X))
        return InitialData(*out)

    def identity_field(self, n: int):
        base = ExpressionField(_parse_expr(self.get("identity", "field"), "[identity] field"), n)
        ct = self.get("identity", "cutoff_t").strip()
        cx = self.get("identity", "cutoff_x").strip()
        if not ct and not cx:
            return base
        tvals = _floats(ct, "[identity] cutoff_t")
        xvals = _floats(cx, "[identity] cutoff_x")
        if len(tvals) != 2 or len(xvals) != 2 * n:
            raise ValidationError("[identity] cutoff_t needs 2 numbers and cutoff_x 2 per axis")
        try:
            return CutoffField(base, tuple(tvals), [tuple(xvals[2 * k:2 * k + 2]) for k in range(n)],
                               p=self.int_("identity", "cutoff_power"))
        except ValueError as exc:
            raise ValidationError(f"[identity] cutoff: {exc}") from None

    def identity_matrix(self, n: int):
        text = self.get("identity", "b").strip()
        if text == "identity":
            entries = [[sp.Integer(int(i == j)) for j in range(n)] for i in range(n)]
        else:
            items = [s.strip() for s in text.split(",")]
            if len(items) != n * n:
                raise ValidationError(f"[identity] b needs 'identity' or {n * n} comma-separated entries")
            flat = [_parse_expr(s, "[identity] b") for s in items]
            entries = [flat[i * n:(i + 1) * n] for i in range(n)]
        return ExpressionMatrix(entries, n)

    def phi(self):
        expr = _parse_expr(self.get("identity", "phi"), "[identity] phi")
        x = SYMBOLS["x1"]
        fs = [sp.lambdify([x], e, modules="numpy") for e in (expr, sp.diff(expr, x), sp.diff(expr, x, 2))]
        return lambda xs: tuple(np.broadcast_to(np.asarray(f(xs), dtype=float), np.shape(xs)) for f in fs)

    def ladder(self) -> List[float]:
        return _floats(self.get("identity", "ladder"), "[identity] ladder")

    def sweep_values(self) -> List[str]:
        text = self.get("sweep", "values").strip()
        return [v.strip() for v in text.split(",") if v.strip()] if text else []


def parse_config(text: str, seed: Optional[int] = None, command: Optional[str] = None) -> ExperimentConfig:
    """Parse INI text; ``seed`` and ``command`` override the file's [run] values."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed configuration file: {exc}") from None
    values = {s: dict(v) for s, v in DEFAULTS.items()}
    for sec in cp.sections():
        if sec not in DEFAULTS:
            raise ValidationError(f"unknown configuration section [{sec}]")
        for key, val in cp[sec].items():
            if key not in DEFAULTS[sec]:
                raise ValidationError(f"unknown configuration key [{sec}] {key}")
            values[sec][key] = val.strip()
    cfg = ExperimentConfig(values)
    if seed is not None:
        cfg.set("run", "seed", str(int(seed)))
    if command is not None:
        cfg.set("run", "command", command)
    if cfg.command not in COMMANDS:
        raise ValidationError(f"[run] command={cfg.command!r}: expected one of {', '.join(COMMANDS)}")
    cfg.seed  # validates
    return cfg


def load_config(path, seed: Optional[int] = None, command: Optional[str] = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read configuration {path}: {exc.strerror}") from None
    return parse_config(text, seed, command)
