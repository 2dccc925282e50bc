"""Config-driven experiment runner.

``carleman-wave-lab <command> --config FILE [--seed N] [--out DIR]``

Every run writes ``config_echo.ini`` (the fully resolved configuration, which
reproduces the run), ``report.csv``, ``summary.txt`` and ``plot.gp`` plus
command-specific files.  Outputs contain no timings and floats are written
with ``repr`` so identical configurations give byte-identical files.

Exit status: 0 pass, 2 invalid configuration, 3 failed check, 4 numerical
saturation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .config import COMMANDS, ExperimentConfig, load_config
from .errors import CertificationError, CheckFailure, SaturationError, ValidationError
from .estimates import (CarlemanReducer, HiddenRegularityReducer, ObservabilityReducer,
                        certified_lambda, run_reducers)
from .geometry import analyze, require_admissible
from .identity_lab import (identity_residual_deterministic, identity_residual_stochastic,
                           min_order, pointwise_carleman_check, refinement_study)
from .spde_sim import Grid, boundary_normal_trace, coefficient_norms, dump_path, energy, iterate_batches
from .weights import WeightParams, certify_positivity, recheck_certificate

SEED_ENV = "CWL_SEED"
EXIT_OK, EXIT_INVALID, EXIT_CHECK, EXIT_SATURATION = 0, 2, 3, 4

# metric columns per command; sweep rows use these so an empty sweep still has a header
METRICS = {
    "verify-identity": ("mode", "min_order", "residual_l1_finest", "mean", "std_error", "z_score",
                        "num_violations", "min_margin", "tau"),
    "certify-weights": ("k", "lambda0", "beta0", "delta0", "min_F1", "min_F2", "min_G", "c0",
                        "recheck_min_F1", "recheck_min_F2", "recheck_min_G"),
    "simulate": ("num_paths", "mean_energy_0", "mean_energy_T", "max_abs_y"),
    "carleman": ("lam", "beta", "num_paths", "lhs", "rhs_boundary", "rhs_source", "empirical_C"),
    "observability": ("num_paths", "terminal_norm", "trace_term", "f_term", "g_term",
                      "coefficient_norm_exponent", "empirical_ratio", "hidden_trace_norm",
                      "hidden_rhs_shape"),
}
SWEEP_COLUMNS = ("parameter", "value", "hash", "status", "exit_code", "message")
STATUS_NAMES = {EXIT_OK: "ok", EXIT_INVALID: "invalid", EXIT_CHECK: "check_failed",
                EXIT_SATURATION: "saturated"}


@dataclass
class RunResult:
    status: int
    message: str
    metrics: Dict[str, object] = field(default_factory=dict)
    files: Dict[str, Union[str, bytes]] = field(default_factory=dict)


# -- formatting ----------------------------------------------------------------

def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def _plain(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def json_text(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def _gnuplot(title: str, data: str, xlabel: str, ylabel: str, using: str, log: str = "",
             style: str = "linespoints") -> str:
    lines = ["set datafile separator ','", "set key autotitle columnhead",
             f"set title '{title}'", f"set xlabel '{xlabel}'", f"set ylabel '{ylabel}'"]
    if log:
        lines.append(f"set logscale {log}")
    if style == "boxes":
        lines += ["set style fill solid 0.5", "set boxwidth 0.6", "set xtics rotate by -30"]
    lines.append(f"plot '{data}' using {using} with {style}")
    return "\n".join(lines) + "\n"


def _terms_files(title: str, terms: Dict[str, float]) -> Dict[str, str]:
    return {
        "terms.csv": csv_text(("term", "value"), list(terms.items())),
        "plot.gp": _gnuplot(title, "terms.csv", "term", "value", "0:2:xticlabels(1)", style="boxes"),
    }


# -- shared builders -------------------------------------------------------------

def _geometry(cfg: ExperimentConfig):
    dom = cfg.domain()
    c = cfg.c_value(dom)
    geom = analyze(dom, c)
    return dom, geom


def _certificate(cfg: ExperimentConfig, dom, geom):
    T = cfg.T()
    require_admissible(T, geom.R0, geom.R1, geom.c)
    p = cfg.weight_params(dom)
    cert = certify_positivity(geom, p, cfg.resolution("resolution"))
    return cert


def _resolve_lambda_beta(cfg: ExperimentConfig, dom, cert, norms=None):
    lam_text = cfg.get("weights", "lambda").strip()
    beta_text = cfg.get("weights", "beta").strip()
    if lam_text == "auto":
        if norms is None:
            lam = cert.lambda0
        else:
            lam = certified_lambda(norms, cert, cfg.float_("weights", "C_user"))
    else:
        lam = cfg.float_("weights", "lambda")
    beta = cert.beta0 if beta_text == "auto" else cfg.float_("weights", "beta")
    return cfg.weight_params(dom, lam=lam, beta=beta, k=cert.k)


def _raw_c_params(cfg: ExperimentConfig, dom) -> WeightParams:
    """Weight parameters without geometric validation of c (the identity holds for any c)."""
    text = cfg.get("weights", "c").strip()
    try:
        c = float(text)
    except ValueError:
        c = cfg.c_value(dom)
    lam = 1.0 if cfg.get("weights", "lambda").strip() == "auto" else cfg.float_("weights", "lambda")
    beta = 1.0 if cfg.get("weights", "beta").strip() == "auto" else cfg.float_("weights", "beta")
    ktext = cfg.get("weights", "k").strip()
    return WeightParams(lam=lam, c=c, beta=beta, T=cfg.T(), x0=dom.x0,
                        k=float(ktext) if ktext else None, ell_shift=cfg.float_("weights", "ell_shift"))


def _ensemble(cfg: ExperimentConfig, coeffs, init, grid):
    num = cfg.int_("run", "num_paths")
    if num < 1:
        raise ValidationError(f"[run] num_paths={num}: need at least one path")
    bs = cfg.int_("run", "batch_size") or None
    return iterate_batches(coeffs, init, grid, cfg.seed, num, batch_size=bs)


def _sim_setup(cfg: ExperimentConfig, dom):
    T = cfg.T()
    grid = cfg.grid(dom, T)
    grid.check_cfl()
    return grid, cfg.coefficients(dom.n), cfg.initial(dom.n)


# -- commands --------------------------------------------------------------------

def cmd_verify_identity(cfg: ExperimentConfig) -> RunResult:
    mode = cfg.get("identity", "mode").strip()
    dom0 = cfg.domain()
    n = dom0.n
    metrics = dict.fromkeys(METRICS["verify-identity"], "")
    metrics["mode"] = mode
    if mode == "deterministic":
        p = _raw_c_params(cfg, dom0)
        field_ = cfg.identity_field(n)
        b = cfg.identity_matrix(n)
        budgets = []

        def budget_at(h):
            dom = cfg.domain_with_h(h)
            bud = identity_residual_deterministic(field_, b, p, None, cfg.grid(dom, p.T))
            budgets.append(bud)
            return bud

        rows = refinement_study(budget_at, cfg.ladder())
        order = min_order(rows)
        need = cfg.float_("identity", "min_order")
        metrics.update(min_order=order, residual_l1_finest=rows[-1].residual_l1 if rows else "")
        files = {
            "convergence.csv": csv_text(("h", "dt", "residual", "residual_l1", "scale", "order"),
                                        [(r.h, r.dt, r.residual, r.residual_l1, r.scale, r.order) for r in rows]),
            "report.csv": csv_text(("h", "dt", "lambda", "term", "value", "residual"),
                                   [row for bud in budgets for row in bud.rows()]),
            "plot.gp": _gnuplot("identity residual refinement", "convergence.csv", "h", "L1 residual",
                                "1:4", log="xy"),
        }
        ok = math.isfinite(order) and order >= need
        msg = f"observed order {order!r} {'>=' if ok else '<'} required {need!r}"
        return RunResult(EXIT_OK if ok else EXIT_CHECK, msg, metrics, files)

    if mode == "stochastic":
        p = _raw_c_params(cfg, dom0)
        if n != 1:
            raise ValidationError("[identity] mode=stochastic needs a one-dimensional domain")
        grid = Grid.from_dt(dom0, cfg.float_("identity", "horizon"), cfg.float_("identity", "dt"))
        include = cfg.get("identity", "include_ito").strip().lower() in ("1", "true", "yes", "on")
        res = identity_residual_stochastic(cfg.phi(), p, grid, cfg.int_("run", "num_paths"), cfg.seed,
                                           include_ito=include)
        z_max = cfg.float_("identity", "z_max")
        metrics.update(mean=res.mean, std_error=res.std_error, z_score=res.z_score)
        files = {
            "report.csv": csv_text(("num_paths", "dt", "include_ito", "mean", "std_error", "z_score", "ito_term"),
                                   [(res.num_paths, res.dt, include, res.mean, res.std_error, res.z_score,
                                     res.ito_term)]),
            "residuals.csv": csv_text(("path_index", "residual"), list(enumerate(res.residuals))),
            "plot.gp": _gnuplot("per-path identity residuals", "residuals.csv", "path", "residual", "1:2",
                                style="points"),
        }
        # with the Ito term the mean must vanish; without it the run is a negative control
        ok = res.z_score <= z_max if include else res.z_score > z_max
        msg = f"|mean|/se = {res.z_score!r} (threshold {z_max!r}, include_ito={include})"
        return RunResult(EXIT_OK if ok else EXIT_CHECK, msg, metrics, files)

    if mode in ("pointwise", "plain"):
        dom, geom = _geometry(cfg)
        field_ = cfg.identity_field(n)
        cert = None
        if mode == "pointwise":
            cert = _certificate(cfg, dom, geom)
            p = _resolve_lambda_beta(cfg, dom, cert)
        else:
            p = cfg.weight_params(dom)
        rows = []
        for h in cfg.ladder():
            d = cfg.domain_with_h(h)
            grid = cfg.grid(d, p.T)
            r = pointwise_carleman_check(field_, p, grid, "singular" if cert else "plain", cert)
            rows.append((r.h, r.dt, r.min_margin, r.tau, r.num_violations))
        total = sum(r[4] for r in rows)
        metrics.update(num_violations=total, min_margin=min(r[2] for r in rows) if rows else "",
                       tau=rows[-1][3] if rows else "")
        files = {
            "report.csv": csv_text(("h", "dt", "min_margin", "tau", "num_violations"), rows),
            "plot.gp": _gnuplot("pointwise estimate margin", "report.csv", "h", "min margin", "1:3", log="x"),
        }
        if cert is not None:
            files["certificate.json"] = json_text(cert.as_dict())
        msg = f"{total} pointwise violations over the ladder"
        return RunResult(EXIT_OK if total == 0 else EXIT_CHECK, msg, metrics, files)

    raise ValidationError(f"[identity] mode={mode!r}: expected deterministic, stochastic, pointwise or plain")


def cmd_certify_weights(cfg: ExperimentConfig) -> RunResult:
    dom, geom = _geometry(cfg)
    metrics = dict.fromkeys(METRICS["certify-weights"], "")
    try:
        cert = _certificate(cfg, dom, geom)
    except CertificationError as exc:
        cols = ("t", "rho", "F1", "F2", "G")
        rows = [tuple(v[k] for k in cols) for v in exc.violations]
        files = {"report.csv": csv_text(cols, rows),
                 "plot.gp": _gnuplot("lattice violations", "report.csv", "t", "|x - x0|", "1:2", style="points")}
        return RunResult(EXIT_CHECK, str(exc), metrics, files)
    chk = recheck_certificate(cert, geom, cfg.weight_params(dom), cfg.resolution("recheck_resolution"))
    metrics.update({k: getattr(cert, k) for k in ("k", "lambda0", "beta0", "delta0", "min_F1", "min_F2",
                                                  "min_G", "c0")})
    metrics.update(recheck_min_F1=chk["min_F1"], recheck_min_F2=chk["min_F2"], recheck_min_G=chk["min_G"])
    files = {"certificate.json": json_text(cert.as_dict()),
             "report.csv": csv_text(tuple(cfg.flat()) + tuple(metrics),
                                    [tuple(cfg.flat().values()) + tuple(metrics.values())])}
    files.update(_terms_files("certificate minima",
                              {k: metrics[k] for k in ("min_F1", "min_F2", "min_G", "recheck_min_F1",
                                                       "recheck_min_F2", "recheck_min_G")}))
    if not chk["positive"]:
        return RunResult(EXIT_CHECK, f"re-check at {chk['resolution']} found a non-positive minimum", metrics, files)
    return RunResult(EXIT_OK, f"certified lambda0={cert.lambda0!r}, beta0={cert.beta0!r}", metrics, files)


def cmd_simulate(cfg: ExperimentConfig) -> RunResult:
    dom = cfg.domain()
    grid, coeffs, init = _sim_setup(cfg, dom)
    dumps = cfg.int_("run", "dump_paths")
    rows, files = [], {}
    esum = np.zeros(grid.nt + 1)
    bnd = dom.boundary()
    bw = grid.time_weights()[:, None] * bnd.weights
    for batch in _ensemble(cfg, coeffs, init, grid):
        for i in range(batch.y.shape[0]):
            path = batch.path(i)
            E = energy(path)
            esum += E
            tr = boundary_normal_trace(path, bnd)
            rows.append((path.path_index, E[0], E[-1], float(np.abs(path.y).max()),
                         math.sqrt(float(np.sum(bw * tr**2)))))
            if path.path_index < dumps:
                buf = io.BytesIO()
                dump_path(path, buf)
                files[f"paths/path_{path.path_index:05d}.bin"] = buf.getvalue()
    num = len(rows)
    emean = esum / num
    metrics = dict(num_paths=num, mean_energy_0=float(emean[0]), mean_energy_T=float(emean[-1]),
                   max_abs_y=max(r[3] for r in rows))
    files["report.csv"] = csv_text(("path_index", "energy_0", "energy_T", "max_abs_y", "trace_L2"), rows)
    files["energies.csv"] = csv_text(("t", "mean_energy"), list(zip(grid.times, emean)))
    files["plot.gp"] = _gnuplot("mean energy", "energies.csv", "t", "energy", "1:2", style="lines")
    return RunResult(EXIT_OK, f"simulated {num} paths with nt={grid.nt}", metrics, files)


def cmd_carleman(cfg: ExperimentConfig) -> RunResult:
    dom, geom = _geometry(cfg)
    cert = _certificate(cfg, dom, geom)
    grid, coeffs, init = _sim_setup(cfg, dom)
    norms = coefficient_norms(coeffs, grid)
    p = _resolve_lambda_beta(cfg, dom, cert, norms)
    (rep,) = run_reducers(_ensemble(cfg, coeffs, init, grid), [CarlemanReducer(geom, p, coeffs, cert)])
    metrics = dict(lam=p.lam, beta=p.beta, num_paths=rep.num_paths, lhs=rep.lhs, rhs_boundary=rep.rhs_boundary,
                   rhs_source=rep.rhs_source, empirical_C=rep.empirical_C)
    extra = {f"se_{k}": v for k, v in sorted(rep.mc_std_errors.items())}
    extra.update({f"chain_{k}": v for k, v in sorted(rep.chain.items())})
    extra.update(log_scale=rep.log_scale)
    extra.update({f"norm_{k}": v for k, v in norms.as_dict().items()})
    row = {**cfg.flat(), **metrics, **extra}
    files = {"report.csv": csv_text(tuple(row), [tuple(row.values())]),
             "certificate.json": json_text(cert.as_dict())}
    files.update(_terms_files("Carleman budget terms",
                              {"lhs": rep.lhs, "rhs_boundary": rep.rhs_boundary, "rhs_source": rep.rhs_source,
                               **{f"chain_{k}": v for k, v in sorted(rep.chain.items())}}))
    ok = math.isfinite(rep.empirical_C)
    msg = f"empirical_C = {rep.empirical_C!r} at lambda={p.lam!r}"
    return RunResult(EXIT_OK if ok else EXIT_CHECK, msg, metrics, files)


def cmd_observability(cfg: ExperimentConfig) -> RunResult:
    dom, geom = _geometry(cfg)
    T = cfg.T()
    require_admissible(T, geom.R0, geom.R1, geom.c)
    grid, coeffs, init = _sim_setup(cfg, dom)
    norms = coefficient_norms(coeffs, grid)
    obs, hid = run_reducers(_ensemble(cfg, coeffs, init, grid),
                            [ObservabilityReducer(geom, coeffs, T, norms), HiddenRegularityReducer(coeffs, norms)])
    metrics = dict(num_paths=obs.num_paths, terminal_norm=obs.terminal_norm, trace_term=obs.trace_term,
                   f_term=obs.f_term, g_term=obs.g_term, coefficient_norm_exponent=obs.coefficient_norm_exponent,
                   empirical_ratio=obs.empirical_ratio, hidden_trace_norm=hid.trace_norm,
                   hidden_rhs_shape=hid.rhs_bound_shape)
    row = {**cfg.flat(), **metrics, "hidden_data_norm": hid.data_norm,
           **{f"norm_{k}": v for k, v in norms.as_dict().items()}}
    files = {"report.csv": csv_text(tuple(row), [tuple(row.values())])}
    files.update(_terms_files("observability terms",
                              {k: metrics[k] for k in ("terminal_norm", "trace_term", "f_term", "g_term",
                                                       "hidden_trace_norm")}))
    if obs.violation:
        return RunResult(EXIT_CHECK, "terminal norm is positive while the observation side vanishes",
                         metrics, files)
    return RunResult(EXIT_OK, f"empirical ratio {obs.empirical_ratio!r}", metrics, files)


def point_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.to_ini().encode("utf-8")).hexdigest()


def cmd_sweep(cfg: ExperimentConfig, out: Optional[Path] = None) -> RunResult:
    sub = cfg.get("sweep", "command").strip()
    if sub not in METRICS:
        raise ValidationError(f"[sweep] command={sub!r}: expected one of {', '.join(METRICS)}")
    values = cfg.sweep_values()
    param = cfg.get("sweep", "parameter").strip()
    if values:
        if param.count(".") != 1:
            raise ValidationError(f"[sweep] parameter={param!r}: expected section.key")
        section, key = param.split(".")
        if section == "sweep":
            raise ValidationError("[sweep] parameter cannot refer to the sweep section")
    header = SWEEP_COLUMNS + METRICS[sub]
    rows, failures = [], 0
    for value in values:
        point = cfg.copy()
        point.set("run", "command", sub)
        point.set("sweep", "command", "")
        point.set("sweep", "parameter", "")
        point.set("sweep", "values", "")
        point.set(section, key, value)
        digest = point_hash(point)
        pdir = out / "points" / digest if out is not None else None
        done = pdir / "result.json" if pdir is not None else None
        if done is not None and done.exists():
            rec = json.loads(done.read_text(encoding="utf-8"))
        else:
            res = run(point)
            rec = {"exit_code": res.status, "message": res.message,
                   "metrics": {k: res.metrics.get(k, "") for k in METRICS[sub]}}
            if pdir is not None:
                write_outputs(pdir, res)
                done.write_text(json_text(rec), encoding="utf-8")
        code = rec["exit_code"]
        failures += code != EXIT_OK
        rows.append((param, value, digest, STATUS_NAMES.get(code, "error"), code, rec["message"],
                     *(rec["metrics"].get(k, "") for k in METRICS[sub])))
    files = {"report.csv": csv_text(header, rows)}
    metric = METRICS[sub][-1] if sub != "verify-identity" else "min_order"
    col = header.index(metric) + 1
    files["plot.gp"] = _gnuplot(f"{sub} sweep over {param or 'nothing'}", "report.csv", param or "value",
                                metric, f"2:{col}")
    msg = f"{len(rows)} points, {failures} failed"
    return RunResult(EXIT_OK if failures == 0 else EXIT_CHECK, msg, {}, files)


HANDLERS = {
    "verify-identity": cmd_verify_identity,
    "certify-weights": cmd_certify_weights,
    "simulate": cmd_simulate,
    "carleman": cmd_carleman,
    "observability": cmd_observability,
}


# -- driver ----------------------------------------------------------------------

def _summary(cfg: ExperimentConfig, res: RunResult) -> str:
    lines = [f"command: {cfg.command}", f"seed: {cfg.seed}",
             f"status: {res.status} ({STATUS_NAMES.get(res.status, 'error')})", f"message: {res.message}"]
    if res.metrics:
        lines.append("metrics:")
        lines += [f"  {k}: {fmt(v)}" for k, v in res.metrics.items()]
    names = sorted(set(res.files) | {"config_echo.ini", "summary.txt"})
    lines.append("files:")
    lines += [f"  {n}" for n in names]
    return "\n".join(lines) + "\n"


def run(cfg: ExperimentConfig, out: Optional[Path] = None) -> RunResult:
    """Execute the configured command; exceptions become exit statuses."""
    try:
        if cfg.command == "sweep":
            res = cmd_sweep(cfg, out)
        else:
            res = HANDLERS[cfg.command](cfg)
    except ValidationError as exc:
        res = RunResult(EXIT_INVALID, f"invalid configuration: {exc}")
    except SaturationError as exc:
        res = RunResult(EXIT_SATURATION, f"numerical saturation: {exc}")
    except CheckFailure as exc:
        res = RunResult(EXIT_CHECK, f"check failed: {exc}")
    res.files["config_echo.ini"] = cfg.to_ini()
    res.files["summary.txt"] = _summary(cfg, res)
    if "plot.gp" in res.files:
        # keep the plot script honest: it may only reference files of this run
        for token in res.files["plot.gp"].split("'"):
            if token.endswith(".csv") and token not in res.files:
                del res.files["plot.gp"]
                break
    return res


def write_outputs(out: Path, res: RunResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name in sorted(res.files):
        target = out / name
        target.parent.mkdir(parents=True, exist_ok=True)
        data = res.files[name]
        if isinstance(data, bytes):
            target.write_bytes(data)
        else:
            target.write_text(data, encoding="utf-8")


def _env_seed() -> Optional[int]:
    text = os.environ.get(SEED_ENV, "").strip()
    if not text:
        return None
    try:
        return int(text)
    except ValueError:
        raise ValidationError(f"{SEED_ENV}={text!r} is not an integer") from None


def main(argv: Optional[List[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="carleman-wave-lab", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="INI configuration file")
    ap.add_argument("--seed", type=int, default=None, help=f"overrides [run] seed and ${SEED_ENV}")
    ap.add_argument("--out", default="cwl-out", help="output directory (default: cwl-out)")
    args = ap.parse_args(argv)
    out = Path(args.out)
    try:
        seed = args.seed if args.seed is not None else _env_seed()
        cfg = load_config(args.config, seed=seed, command=args.command)
    except ValidationError as exc:
        print(f"carleman-wave-lab: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    res = run(cfg, out)
    write_outputs(out, res)
    stream = sys.stdout if res.status == EXIT_OK else sys.stderr
    print(f"carleman-wave-lab {cfg.command}: {res.message}", file=stream)
    return res.status


if __name__ == "__main__":
    sys.exit(main())
