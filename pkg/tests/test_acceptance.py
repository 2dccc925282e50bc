"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed even
when output capture is on.
"""

import math
import time
from pathlib import Path

import numpy as np
import sympy as sp

from carleman_wave_lab.cli import main
from carleman_wave_lab.errors import CertificationError
from carleman_wave_lab.estimates import (
    carleman_budget,
    certified_lambda,
    lambda_star,
    observability_ratio,
)
from carleman_wave_lab.fields import Const, Sin, sin_sin_field, with_cutoff
from carleman_wave_lab.geometry import DomainSpec, analyze
from carleman_wave_lab.identity_lab import (
    identity_residual_deterministic,
    identity_residual_stochastic,
    min_order,
    pointwise_carleman_check,
    refinement_study,
)
from carleman_wave_lab.multiplier import A_general, IdentityMatrix, ScalarCoefficient1D
from carleman_wave_lab.spde_sim import (
    CoefficientSet,
    Grid,
    InitialData,
    coefficient_norms,
    energy,
    iterate_batches,
    simulate,
    simulate_batch,
)
from carleman_wave_lab.weights import A_coeff, B_coeff, WeightParams, certify_positivity, recheck_certificate

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def report(capsys, num, title, checks, elapsed, limit, detail=""):
    """Print one PASS/FAIL line for criterion ``num`` and assert every check."""
    checks = dict(checks)
    checks[f"runtime < {limit:g} s"] = elapsed < limit
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"[criterion {num:2d}] {'PASS' if ok else 'FAIL'}  {title}  ({elapsed:.1f} s)"
    if detail:
        line += f"  {detail}"
    if failed:
        line += f"  failed: {'; '.join(failed)}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# -- shared configurations -------------------------------------------------------

def reference_setup(h):
    dom = DomainSpec.interval(1, 2, 0.0, h)
    geo = analyze(dom, 0.1)
    p0 = WeightParams(lam=1.0, c=0.1, beta=1.0, T=42.0, x0=(0.0,))
    return dom, geo, p0


def sine_data():
    f = lambda X: np.sin(np.pi * (X[..., 0] - 1))
    return InitialData(f, f)


# -- 1 ---------------------------------------------------------------------------

def test_criterion_01_identity_refinement(capsys):
    t0 = time.perf_counter()
    p = WeightParams(lam=1.0, c=0.1, beta=1.0, T=1.8, x0=(-0.5,), k=0.9)
    field = with_cutoff(sin_sin_field(1), (0.2, 1.6), [(0.1, 0.9)])
    ladder = [1 / 32, 1 / 64, 1 / 128]

    def study(b):
        def at(h):
            g = Grid.from_dt(DomainSpec.interval(0, 1, -0.5, h), 1.8, 0.9 * h)
            return identity_residual_deterministic(field, b, p, grid=g)
        return min_order(refinement_study(at, ladder))

    order_id = study(IdentityMatrix(1))
    order_var = study(ScalarCoefficient1D(Const(1.0) + Sin(1.0) * 0.5))
    elapsed = time.perf_counter() - t0
    report(capsys, 1, "identity residual order",
           {"order >= 1.8 for b = I": order_id >= 1.8, "order >= 1.5 for b = 1 + sin(x)/2": order_var >= 1.5},
           elapsed, 30, f"orders {order_id:.3f} (b=I), {order_var:.3f} (varying b)")


# -- 2 ---------------------------------------------------------------------------

def test_criterion_02_A_cross_derivation(capsys):
    rng = np.random.default_rng(2)
    groups, per = 100, 100
    c, k, T, n = 0.1, 0.9, 3.0, 1
    x0 = (-1.5,)
    # independent symbolic oracle of the general definition with b = I
    ts, ls, xs = sp.symbols("t lam x")
    ell = ls * ((xs - x0[0]) ** 2 - c * (ts - T / 2) ** 2)
    A_sym = sp.lambdify((ts, ls, xs), sp.diff(ell, ts) ** 2 - sp.diff(ell, ts, 2) - sp.diff(ell, xs) ** 2
                        + sp.diff(ell, xs, 2) - (2 * n - 2 * c - 1 + k) * ls, "numpy")
    t0 = time.perf_counter()
    worst = worst_sym = 0.0
    for _ in range(groups):
        lam = float(rng.uniform(1, 1e3))
        t = rng.uniform(0, T, per)
        x = rng.uniform(-1, 1, (per, n))
        p = WeightParams(lam=lam, c=c, beta=1.0, T=T, x0=x0, k=k)
        gen = A_general(p.weight().jet(t, x), p.psi_field(n).jet(t, x), IdentityMatrix(n).jet(t, x))
        closed = A_coeff(t, x, p)
        worst = max(worst, float(np.max(np.abs(gen - closed) / np.abs(closed))))
        worst_sym = max(worst_sym, float(np.max(np.abs(A_sym(t, lam, x[:, 0]) - closed) / np.abs(closed))))
    elapsed = time.perf_counter() - t0
    report(capsys, 2, "A general vs closed form on 10^4 samples",
           {"rel err <= 1e-12": worst <= 1e-12, "symbolic oracle rel err <= 1e-12": worst_sym <= 1e-12},
           elapsed, 1, f"max rel err {worst:.2e} (symbolic {worst_sym:.2e})")


# -- 3 ---------------------------------------------------------------------------

def test_criterion_03_B_leading_order(capsys):
    t0 = time.perf_counter()
    lams = [10.0, 1e2, 1e3, 1e4]
    slopes = []
    for t, x in ((13.0, 1.3), (21.0, 1.0), (5.0, 1.9), (37.5, 1.6)):
        rem = [abs(B_coeff(t, np.array([x]), WeightParams(lam=l, c=0.1, beta=1.0, T=40.0, x0=(0.0,), k=0.9), 1)[1])
               for l in lams]
        slopes.append(float(np.polyfit(np.log(lams), np.log(rem), 1)[0]))
    elapsed = time.perf_counter() - t0
    report(capsys, 3, "B remainder log-log slope",
           {"slope <= 2.05": max(slopes) <= 2.05}, elapsed, 1,
           "slopes " + ", ".join(f"{s:.4f}" for s in slopes))


# -- 4 ---------------------------------------------------------------------------

def test_criterion_04_ito_correction(capsys):
    t0 = time.perf_counter()
    p = WeightParams(lam=1.0, c=0.1, beta=1.0, T=4.0, x0=(-0.5,), k=0.9)
    g = Grid.from_dt(DomainSpec.interval(0, 1, -0.5, 1 / 32), 1.0, 1e-3)
    with_term = identity_residual_stochastic(Sin(math.pi), p, g, 1000, 7, include_ito=True)
    without = identity_residual_stochastic(Sin(math.pi), p, g, 1000, 7, include_ito=False)
    elapsed = time.perf_counter() - t0
    report(capsys, 4, "Ito term necessity",
           {"|mean| <= 3 SE with the term": abs(with_term.mean) <= 3 * with_term.std_error,
            "|mean| > 5 SE without it": abs(without.mean) > 5 * without.std_error},
           elapsed, 120, f"z = {with_term.z_score:.2f} with, {without.z_score:.1f} without")


# -- 5 ---------------------------------------------------------------------------

def test_criterion_05_positivity_certification(capsys):
    dom, geo, p0 = reference_setup(1 / 32)
    p = p0.replace(k=1 - 0.1)
    t0 = time.perf_counter()
    cert = certify_positivity(geo, p, resolution=(200, 200))
    chk = recheck_certificate(cert, geo, p, (2000, 2000))
    t_ok = time.perf_counter() - t0
    t1 = time.perf_counter()
    try:
        certify_positivity(geo, p.replace(T=100.0))
        rejected = False
    except CertificationError:
        rejected = True
    t_bad = time.perf_counter() - t1
    report(capsys, 5, "positivity certificate",
           {"minima > 0 on 200x200": min(cert.min_F1, cert.min_F2, cert.min_G) > 0,
            "minima > 0 on 2000x2000": chk["positive"] and min(chk["min_F1"], chk["min_F2"], chk["min_G"]) > 0,
            "T = 100 rejected": rejected, "T = 100 runtime < 10 s": t_bad < 10},
           t_ok, 10, f"lambda0={cert.lambda0:g}, beta0={cert.beta0:g}, min F1={cert.min_F1:.4g}")


# -- 6 ---------------------------------------------------------------------------

def test_criterion_06_pointwise_estimate(capsys):
    t0 = time.perf_counter()
    dom, geo, p0 = reference_setup(1 / 32)
    cert = certify_positivity(geo, p0)
    q = p0.replace(lam=cert.lambda0, beta=cert.beta0)
    f = sin_sin_field(1, offset=1.0)
    taus, fine_ok = [], True
    for h in (1 / 32, 1 / 64):
        g = Grid.from_cfl(DomainSpec.interval(1, 2, 0.0, h), 42.0)
        r = pointwise_carleman_check(f, q, g, "singular", cert)
        fine_ok &= r.passed and r.min_margin >= -r.tau
        taus.append(r.tau)
    g = Grid.from_cfl(dom, 42.0)
    neg = pointwise_carleman_check(f, q.replace(k=1.5), g, "singular", cert)
    elapsed = time.perf_counter() - t0
    report(capsys, 6, "pointwise singular-weight estimate",
           {"no violations beyond tau(h)": fine_ok, "tau shrinks under refinement": taus[1] < taus[0],
            "k = 1.5 produces violations": neg.num_violations > 0},
           elapsed, 60, f"tau = {taus[0]:.2e} -> {taus[1]:.2e}; negative control {neg.num_violations} violations")


# -- 7 ---------------------------------------------------------------------------

def test_criterion_07_spde_solver(capsys):
    t0 = time.perf_counter()
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 128)
    g = Grid.from_cfl(dom, 1.0)
    init = InitialData(lambda X: np.sin(np.pi * X[..., 0]))
    path = simulate(CoefficientSet(), init, g, 1)
    x = dom.points()[..., 0]
    err = float(np.abs(path.y - np.cos(np.pi * g.times[:, None]) * np.sin(np.pi * x)).max())
    E = energy(path)
    drift = float(np.abs(E - E[0]).max() / E[0])

    dom32 = DomainSpec.interval(0, 1, -0.5, 1 / 32)
    g32 = Grid.from_cfl(dom32, 1.0)
    co = CoefficientSet(a4=1.0)
    det = simulate(co, init, g32, 0, noise=False)
    ens = simulate_batch(co, init, g32, 21, range(1000))
    w = dom32.quadrature_weights()
    functionals = {
        "y(T/2, 1/2)": lambda y: y[:, g32.nt // 2, 16],
        "y(T, 1/2)": lambda y: y[:, -1, 16],
        "int y(T) dx": lambda y: np.sum(w * y[:, -1], axis=-1),
    }
    zs = {}
    for name, fn in functionals.items():
        s = fn(ens.y)
        zs[name] = abs(s.mean() - fn(det.y[None])[0]) / (s.std(ddof=1) / math.sqrt(s.size))
    elapsed = time.perf_counter() - t0
    report(capsys, 7, "SPDE solver",
           {"free-wave max error <= 5e-3": err <= 5e-3, "energy drift <= 1e-3": drift <= 1e-3,
            "ensemble mean within 3 SE": max(zs.values()) <= 3},
           elapsed, 120, f"error {err:.2e}, drift {drift:.2e}, max z {max(zs.values()):.2f}")


# -- 8 ---------------------------------------------------------------------------

def _carleman_run(h, num_paths, seed=11):
    dom, geo, p0 = reference_setup(h)
    cert = certify_positivity(geo, p0)
    g = Grid.from_cfl(dom, 42.0)
    co = CoefficientSet(a4=1.0)
    lam = certified_lambda(coefficient_norms(co, g), cert)
    p = p0.replace(lam=lam, beta=cert.beta0)
    ens = iterate_batches(co, sine_data(), g, seed, num_paths, batch_size=200)
    return carleman_budget(ens, geo, p, co, cert), lam, (geo, p, co, cert, g)


def test_criterion_08_integrated_carleman(capsys):
    t0 = time.perf_counter()
    base, lam, (geo, p, co, cert, g) = _carleman_run(1 / 32, 1000)
    doubled, _, _ = _carleman_run(1 / 32, 2000)
    fine, _, _ = _carleman_run(1 / 64, 1000)
    zero = carleman_budget(simulate_batch(co, InitialData(0.0, 0.0), g, 11, range(10)), geo, p, co, cert)
    elapsed = time.perf_counter() - t0
    C0, C1, C2 = base.empirical_C, doubled.empirical_C, fine.empirical_C
    report(capsys, 8, "integrated Carleman estimate",
           {"empirical_C finite": all(math.isfinite(v) and v > 0 for v in (C0, C1, C2)),
            "paths doubled within 20%": abs(C1 / C0 - 1) <= 0.2,
            "h halved within 20%": abs(C2 / C0 - 1) <= 0.2,
            "zero data gives zero terms": zero.lhs == zero.rhs_boundary == zero.rhs_source == 0.0,
            "lambda in certified range": lam >= cert.lambda0},
           elapsed, 300,
           f"lambda={lam:g} (lambda*={lambda_star(coefficient_norms(co, g)):g}); C = {C0:.5g}, {C1:.5g} (2x paths), "
           f"{C2:.5g} (h/2)")


# -- 9 ---------------------------------------------------------------------------

def test_criterion_09_observability(capsys):
    t0 = time.perf_counter()
    ratios = {}
    for h in (1 / 32, 1 / 64):
        dom, geo, _ = reference_setup(h)
        g = Grid.from_cfl(dom, 42.0)
        free = CoefficientSet()
        ratios["free", h] = observability_ratio(simulate(free, sine_data(), g, 0), geo, free).empirical_ratio
        noisy = CoefficientSet(a4=1.0)
        ratios["noisy", h] = observability_ratio(iterate_batches(noisy, sine_data(), g, 5, 200, batch_size=100),
                                                 geo, noisy).empirical_ratio
    stable = all(abs(ratios[k, 1 / 64] / ratios[k, 1 / 32] - 1) <= 0.2 for k in ("free", "noisy"))
    finite = all(math.isfinite(v) and v > 0 for v in ratios.values())

    dom, geo, _ = reference_setup(1 / 64)
    g = Grid.from_cfl(dom, 42.0)
    xs, ys = [], []
    for a1 in (0.0, 1.0, 2.0, 4.0):
        co = CoefficientSet(a1=a1)
        o = observability_ratio(simulate(co, sine_data(), g, 0), geo, co)
        xs.append(a1**2)
        ys.append(math.log(o.empirical_ratio))
    slope = float(np.polyfit(xs, ys, 1)[0])
    elapsed = time.perf_counter() - t0
    report(capsys, 9, "observability ratio",
           {"ratios finite": finite, "refinement within 20%": stable, "log-ratio slope >= 0": slope >= 0},
           elapsed, 600,
           f"free {ratios['free', 1 / 32]:.4f} -> {ratios['free', 1 / 64]:.4f}, noisy "
           f"{ratios['noisy', 1 / 32]:.4f} -> {ratios['noisy', 1 / 64]:.4f}; slope vs |a1|^2 = {slope:.4f}")


# -- 10 --------------------------------------------------------------------------

def test_criterion_10_reproducibility(capsys, tmp_path):
    t0 = time.perf_counter()
    same = True
    compared = 0
    for name in ("carleman.ini", "sweep.ini", "simulate.ini"):
        outs = []
        for i in range(2):
            out = tmp_path / f"{name}-{i}"
            cfg = CONFIGS / name
            command = next(line.split("=")[1].strip() for line in cfg.read_text().splitlines()
                           if line.startswith("command"))
            assert main([command, "--config", str(cfg), "--out", str(out), "--seed", "9"]) == 0
            outs.append(out)
        for csv in sorted(outs[0].rglob("*.csv")):
            other = outs[1] / csv.relative_to(outs[0])
            same &= other.exists() and csv.read_bytes() == other.read_bytes()
            compared += 1
    elapsed = time.perf_counter() - t0
    report(capsys, 10, "byte-identical reruns",
           {"all CSVs identical": same and compared > 0}, elapsed, 120, f"{compared} CSV files compared")
