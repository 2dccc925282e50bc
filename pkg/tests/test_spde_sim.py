import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carleman_wave_lab.errors import CFLError, NonFiniteError, ValidationError
from carleman_wave_lab.geometry import DomainSpec, observation_boundary
from carleman_wave_lab.spde_sim import (
    CoefficientSet,
    Grid,
    InitialData,
    PerPathGrid,
    boundary_normal_trace,
    coefficient_norms,
    dump_path,
    energy,
    generate_brownian,
    iterate_batches,
    laplacian,
    load_path,
    simulate,
    simulate_batch,
)

SINE = InitialData(lambda X: np.sin(np.pi * X[..., 0]))


def free_wave(N, T=1.0):
    dom = DomainSpec.interval(0, 1, -0.5, 1 / N)
    grid = Grid.from_cfl(dom, T)
    return grid, simulate(CoefficientSet(), SINE, grid, 1)


# -- noise -------------------------------------------------------------------

def test_brownian_variance():
    dt = 1e-3
    inc = generate_brownian(10**6, 5, 0, dt)
    assert abs(inc.var() / dt - 1) < 0.01
    assert abs(inc.mean()) < 3 * math.sqrt(dt / 1e6)


def test_brownian_deterministic_and_prefix_stable():
    a = generate_brownian(100, 3, 7, 0.01)
    np.testing.assert_array_equal(a, generate_brownian(100, 3, 7, 0.01))
    np.testing.assert_array_equal(a[:40], generate_brownian(40, 3, 7, 0.01))
    assert not np.array_equal(a, generate_brownian(100, 3, 8, 0.01))
    assert not np.array_equal(a, generate_brownian(100, 4, 7, 0.01))


def test_brownian_endpoint_variance_across_paths():
    T, steps, paths = 2.0, 4, 100_000
    ends = np.array([generate_brownian(steps, 11, i, T / steps).sum() for i in range(paths)])
    assert abs(ends.var() / T - 1) < 0.02


def test_brownian_rejects_empty():
    with pytest.raises(ValidationError):
        generate_brownian(0, 1)


# -- grids -------------------------------------------------------------------

def test_grid_cfl():
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 10)
    g = Grid.from_cfl(dom, 1.0)
    assert g.dt <= 0.9 * dom.h
    with pytest.raises(CFLError, match="h="):
        Grid.from_dt(dom, 1.0, 0.1).check_cfl()
    with pytest.raises(ValidationError):
        Grid.from_dt(dom, 1.0, 0.3)


def test_grid_cfl_2d_uses_sqrt_n():
    dom = DomainSpec.rectangle((0, 0), (1, 1), (-1, -1), 0.1)
    g = Grid.from_cfl(dom, 1.0)
    assert g.dt <= 0.9 * 0.1 / math.sqrt(2) * (1 + 1e-12)
    with pytest.raises(CFLError):
        Grid.from_dt(dom, 0.8, 0.08).check_cfl()


def test_simulate_rejects_cfl_violation():
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 10)
    with pytest.raises(CFLError):
        simulate(CoefficientSet(), SINE, Grid.from_dt(dom, 1.0, 0.1), 0)


def test_initial_data_must_vanish_on_boundary():
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 8)
    with pytest.raises(ValidationError):
        InitialData(lambda X: np.cos(X[..., 0])).evaluate(dom)


# -- deterministic accuracy --------------------------------------------------

def test_free_wave_matches_exact_solution_with_second_order():
    errs = []
    for N in (32, 64, 128):
        g, p = free_wave(N)
        x = g.domain.points()[..., 0]
        exact = np.cos(np.pi * g.times[:, None]) * np.sin(np.pi * x)
        errs.append(np.abs(p.y - exact).max())
        # reported velocity is the exact one at t = 0
        np.testing.assert_allclose(p.z[0], 0.0, atol=1e-15)
    assert errs[-1] <= 5e-3
    assert errs[0] / errs[1] >= 3.5 and errs[1] / errs[2] >= 3.5


def test_free_wave_2d():
    errs = []
    for N in (16, 32):
        dom = DomainSpec.rectangle((0, 0), (1, 1), (-1, -1), 1 / N)
        g = Grid.from_cfl(dom, 0.5)
        init = InitialData(lambda X: np.sin(np.pi * X[..., 0]) * np.sin(np.pi * X[..., 1]))
        p = simulate(CoefficientSet(), init, g, 0)
        X = dom.points()
        exact = np.cos(math.sqrt(2) * np.pi * 0.5) * np.sin(np.pi * X[..., 0]) * np.sin(np.pi * X[..., 1])
        errs.append(np.abs(p.y[-1] - exact).max())
    assert errs[0] / errs[1] >= 3.5


def test_energy_conservation():
    g, p = free_wave(128)
    E = energy(p)
    assert np.abs(E - E[0]).max() / E[0] <= 1e-3
    assert E[0] == pytest.approx(np.pi**2 / 4, rel=1e-3)
    assert energy(p, g.times[10]) == E[10]
    with pytest.raises(ValidationError):
        energy(p, g.times[10] + g.dt / 3)


def test_zero_data_gives_zero_solution():
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 16)
    g = Grid.from_cfl(dom, 1.0)
    p = simulate(CoefficientSet(a1=1.0, a3=2.0, a4=3.0), InitialData(0.0, 0.0), g, 4)
    assert np.all(p.y == 0) and np.all(p.z == 0)
    assert np.all(energy(p) == 0)
    assert np.all(boundary_normal_trace(p) == 0)


def test_energy_homogeneity():
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 16)
    g = Grid.from_cfl(dom, 0.5)
    p1 = simulate(CoefficientSet(a4=1.0), SINE, g, 2)
    p2 = simulate(CoefficientSet(a4=1.0), InitialData(lambda X: 2 * np.sin(np.pi * X[..., 0])), g, 2)
    np.testing.assert_allclose(energy(p2), 4 * energy(p1), rtol=1e-12)


def test_boundary_trace_free_wave():
    g, p = free_wave(128)
    tr = boundary_normal_trace(p)
    # outward derivative at x = 1 is -y_x(1) ... with y_x(1) = -pi cos(pi t)
    exact = -np.pi * np.cos(np.pi * g.times)
    assert np.abs(tr[:, 1] - exact).max() <= 2e-3
    assert np.abs(tr[:, 0] - exact).max() <= 2e-3
    _, pc = free_wave(64)
    errc = np.abs(boundary_normal_trace(pc)[:, 1] + np.pi * np.cos(np.pi * pc.grid.times)).max()
    assert errc / np.abs(tr[:, 1] - exact).max() >= 3.0


def test_boundary_trace_masked():
    dom = DomainSpec.interval(1, 2, 0.0, 1 / 16)
    g = Grid.from_cfl(dom, 1.0)
    p = simulate(CoefficientSet(), InitialData(lambda X: np.sin(np.pi * (X[..., 0] - 1))), g, 0)
    full = boundary_normal_trace(p)
    mask = observation_boundary(dom)
    np.testing.assert_array_equal(boundary_normal_trace(p, mask=mask), np.where(mask, full, 0.0))


def test_laplacian_of_quadratic_2d():
    dom = DomainSpec.rectangle((0, 0), (1, 2), (-1, -1), 0.25)
    X = dom.points()
    y = X[..., 0] ** 2 + 3 * X[..., 1] ** 2
    lap = laplacian(y, dom.h, 2)
    np.testing.assert_allclose(lap[1:-1, 1:-1], 8.0, rtol=1e-12)
    assert np.all(lap[0] == 0) and np.all(lap[:, -1] == 0)


# -- stochastic properties ---------------------------------------------------

def test_dirichlet_invariance_for_every_path():
    dom = DomainSpec.rectangle((0, 0), (1, 1), (-1, -1), 1 / 8)
    g = Grid.from_cfl(dom, 0.5)
    init = InitialData(lambda X: np.sin(np.pi * X[..., 0]) * np.sin(np.pi * X[..., 1]))
    b = simulate_batch(CoefficientSet(a1=0.5, a2=np.array([1.0, -1.0]), a4=2.0, g=1.0, f=1.0), init, g, 3,
                       range(5))
    for y in (b.y, b.z):
        assert np.all(y[..., 0, :] == 0) and np.all(y[..., -1, :] == 0)
        assert np.all(y[..., :, 0] == 0) and np.all(y[..., :, -1] == 0)


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3), st.integers(0, 1000))
def test_linearity_in_data(alpha, seed):
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 16)
    g = Grid.from_cfl(dom, 0.5)
    y0 = lambda X: np.sin(np.pi * X[..., 0])
    y1 = lambda X: X[..., 0] * (1 - X[..., 0])
    base = dict(a1=0.3, a3=lambda t, X: np.cos(X[..., 0]), a4=1.5)
    p1 = simulate(CoefficientSet(**base, f=1.0, g=0.5), InitialData(y0, y1), g, seed)
    p2 = simulate(CoefficientSet(**base, f=alpha, g=0.5 * alpha),
                  InitialData(lambda X: alpha * y0(X), lambda X: alpha * y1(X)), g, seed)
    scale = np.abs(p1.y).max()
    np.testing.assert_allclose(p2.y, alpha * p1.y, rtol=0, atol=1e-12 * abs(alpha) * scale)


def test_reproducible_paths():
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 16)
    g = Grid.from_cfl(dom, 0.5)
    co = CoefficientSet(a4=1.0)
    a = simulate_batch(co, SINE, g, 9, range(4))
    b = simulate_batch(co, SINE, g, 9, range(4))
    np.testing.assert_array_equal(a.y, b.y)
    # a path does not depend on which batch produced it
    c = simulate(co, SINE, g, 9, path_index=2)
    np.testing.assert_array_equal(a.y[2], c.y)
    parts = list(iterate_batches(co, SINE, g, 9, 4, batch_size=3))
    np.testing.assert_array_equal(np.concatenate([p.y for p in parts]), a.y)


def test_ensemble_mean_matches_deterministic_solution():
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 32)
    g = Grid.from_cfl(dom, 1.0)
    co = CoefficientSet(a4=1.0)
    det = simulate(co, SINE, g, 0, noise=False)
    b = simulate_batch(co, SINE, g, 21, range(1000))
    # nodes of one time level are strongly correlated, so test a few separate functionals
    mid = dom.grid_shape()[0] // 2
    for k in (g.nt // 4, g.nt // 2, g.nt):
        sample = b.y[:, k, mid]
        se = sample.std(ddof=1) / math.sqrt(len(sample))
        assert abs(sample.mean() - det.y[k, mid]) <= 3 * se


def test_per_path_coefficients():
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 8)
    g = Grid.from_cfl(dom, 0.2)
    vals = np.zeros((3, g.nt + 1, 9))
    vals[1] = 1.0
    co = CoefficientSet(a3=PerPathGrid(vals))
    b = simulate_batch(co, SINE, g, 0, range(3))
    np.testing.assert_array_equal(b.y[0], b.y[2])
    assert not np.array_equal(b.y[0], b.y[1])


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_aborts_with_step():
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 8)
    g = Grid.from_cfl(dom, 50.0)
    with pytest.raises(NonFiniteError) as info:
        simulate(CoefficientSet(a3=1e300), SINE, g, 0)
    assert info.value.step >= 1


# -- norms and dumps ----------------------------------------------------------

def test_coefficient_norms():
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 64)
    g = Grid.from_cfl(dom, 2.0)
    nb = coefficient_norms(CoefficientSet(a3=1.0), g)
    assert nb.a3 == pytest.approx(1.0, rel=1e-14)
    nb = coefficient_norms(CoefficientSet(a1=lambda t, X: np.sin(t) + 0 * X[..., 0]),
                           Grid.from_dt(dom, math.pi, math.pi / 400))
    assert nb.a1 == pytest.approx(1.0, abs=1e-12)
    nb = coefficient_norms(CoefficientSet(a3=lambda t, X: X[..., 0]), g)
    assert nb.a3 == pytest.approx(0.5, rel=1e-12)
    nb = coefficient_norms(CoefficientSet(a1=2.0), g)
    assert nb.exponent == pytest.approx(4.0)


def test_coefficient_norms_l2_sources():
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 64)
    g = Grid.from_dt(dom, 2.0, 1 / 100)
    nb = coefficient_norms(CoefficientSet(f=3.0, g=lambda t, X: np.sin(np.pi * X[..., 0])), g)
    assert nb.f == pytest.approx(3 * math.sqrt(2), rel=1e-12)
    assert nb.g == pytest.approx(1.0, rel=1e-3)


def test_dump_roundtrip():
    dom = DomainSpec.interval(0, 1, -0.5, 1 / 8)
    g = Grid.from_cfl(dom, 0.5)
    p = simulate(CoefficientSet(a4=1.0), SINE, g, 5, path_index=3)
    buf = io.BytesIO()
    dump_path(p, buf)
    buf.seek(0)
    header, arrays = load_path(buf)
    assert header["seed"] == 5 and header["path_index"] == 3 and header["nt"] == g.nt
    for name in ("y", "z", "dW"):
        np.testing.assert_array_equal(arrays[name], getattr(p, name))
    with pytest.raises(ValidationError):
        load_path(io.BytesIO(b"garbage!"))
