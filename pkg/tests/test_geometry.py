import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carleman_wave_lab.errors import GeometryError, InfeasibleWindowError, ValidationError
from carleman_wave_lab.geometry import (
    DomainSpec,
    admissible_time_window,
    analyze,
    brute_force_radii,
    critical_c,
    observation_boundary,
    radii,
    require_admissible,
    select_c,
    time_conditions_hold,
)


def test_radii_interval():
    assert radii(DomainSpec.interval(1, 2, 0.0, 0.1)) == (1.0, 2.0)


def test_radii_square_matches_brute_force():
    dom = DomainSpec.rectangle((0, 0), (1, 1), (-1, 0), 0.5)
    R0, R1 = radii(dom)
    assert R0 == pytest.approx(1.0, abs=1e-15)
    assert R1 == pytest.approx(math.sqrt(5), abs=1e-15)
    b0, b1 = brute_force_radii(dom, 1e-3)
    assert abs(b0 - R0) <= 1e-3 and abs(b1 - R1) <= 1e-3


def test_radii_disk():
    dom = DomainSpec.disk((3, 0), 1, (0, 0), 0.1)
    assert radii(dom) == pytest.approx((2.0, 4.0), abs=1e-15)


@pytest.mark.parametrize("x0", [(0.5, 0.5), (1.0, 0.3), (0.0, 0.0)])
def test_x0_in_closure_rejected(x0):
    with pytest.raises(GeometryError):
        DomainSpec.rectangle((0, 0), (1, 1), x0, 0.25)


def test_disk_x0_on_circle_rejected():
    with pytest.raises(GeometryError):
        DomainSpec.disk((3, 0), 1, (2, 0), 0.1)


def test_bad_h_rejected():
    with pytest.raises(GeometryError):
        DomainSpec.interval(0, 1, -1, 0.0)
    with pytest.raises(GeometryError):
        DomainSpec.interval(0, 1, -1, 0.3).grid_shape()


def test_mask_interval():
    dom = DomainSpec.interval(1, 2, 0.0, 0.1)
    assert observation_boundary(dom).tolist() == [False, True]


def test_mask_square_per_face():
    dom = DomainSpec.rectangle((0, 0), (1, 1), (-1, 0.5), 0.25)
    bnd = dom.boundary()
    mask = observation_boundary(dom, bnd)
    # independent per-face dot products with the analytic face normals
    for p, nu, m in zip(bnd.points, bnd.normals, mask):
        dot = (p[0] + 1) * nu[0] + (p[1] - 0.5) * nu[1]
        assert m == (dot > 0)
    on_face = lambda axis, val: np.isclose(bnd.points[:, axis], val) & (bnd.normals[:, axis] != 0)
    assert mask[on_face(0, 1.0)].all()
    assert not mask[on_face(0, 0.0)].any()
    # both horizontal faces have (x - x0) . nu = +0.5
    assert mask[on_face(1, 0.0)].all() and mask[on_face(1, 1.0)].all()


def test_mask_disk_points():
    dom = DomainSpec.disk((3, 0), 1, (0, 0), 0.05)
    bnd = dom.boundary()
    mask = observation_boundary(dom, bnd)
    i4 = np.argmin(np.linalg.norm(bnd.points - [4, 0], axis=1))
    i2 = np.argmin(np.linalg.norm(bnd.points - [2, 0], axis=1))
    assert mask[i4] and not mask[i2]
    # (x - x0) . nu = 3 cos(phi) + 1 on this circle
    cosphi = bnd.normals[:, 0]
    np.testing.assert_array_equal(mask, 3 * cosphi + 1 > 0)


def test_mask_tie_excluded():
    # x0 on the line of the x2 = 0 face: (x - x0) . nu = 0 there
    dom = DomainSpec.rectangle((0, 0), (1, 1), (-1, 0.0), 0.25)
    bnd = dom.boundary()
    mask = observation_boundary(dom, bnd)
    bottom = np.isclose(bnd.points[:, 1], 0.0) & (bnd.normals[:, 1] == -1)
    assert not mask[bottom].any()


def test_select_c_user_values():
    assert select_c(1, 2, 0.1) == 0.1
    assert (4 + 5 * 0.1) / (9 * 0.1) > 4
    with pytest.raises(GeometryError, match=repr(4 / 31)):
        select_c(1, 2, 0.25)
    assert critical_c(1, 2) == pytest.approx(4 / 31, rel=1e-15)


def test_select_c_degenerate_radii():
    with pytest.raises(GeometryError):
        select_c(1, 1, 0.1)


@pytest.mark.parametrize("c", [0.0, 1.0, -0.1, 1.5])
def test_select_c_out_of_range(c):
    with pytest.raises(GeometryError):
        select_c(1, 1.00001, c)


def test_select_c_unknown_strategy():
    with pytest.raises(GeometryError):
        select_c(1, 2, "largest")


def test_window_reference():
    win = admissible_time_window(1, 2, 0.1)
    assert win.lower == pytest.approx(40.0, rel=1e-15)
    assert win.upper == pytest.approx(math.sqrt(2000), rel=1e-15)
    assert win.contains(42) and not win.contains(100)


def test_window_empty_at_critical_c():
    win = admissible_time_window(1, 2, 4 / 31)
    assert win.empty or win.upper - win.lower < 1e-12


def test_window_near_degenerate_radii():
    R0, R1, c = 1.0, 1.0001, 0.5
    assert (4 + 5 * c) * R0**2 / (9 * c) > R1**2
    win = admissible_time_window(R0, R1, c)
    assert win.lower == pytest.approx(4.0004, rel=1e-12)
    assert win.upper == pytest.approx(4 * math.sqrt(6.5 / 4.5), rel=1e-12)


def test_require_admissible_message_cites_inequality():
    require_admissible(42, 1, 2, 0.1)
    with pytest.raises(InfeasibleWindowError, match=r"c\^2 T\^2") as info:
        require_admissible(100, 1, 2, 0.1)
    assert isinstance(info.value, ValidationError)
    assert "T=100" in str(info.value)


def test_analyze_report():
    rep = analyze(DomainSpec.interval(1, 2, 0.0, 0.1), 0.1)
    assert (rep.R0, rep.R1, rep.c, rep.n) == (1.0, 2.0, 0.1, 1)
    d = rep.as_dict()
    assert d["gamma0_nodes"] == [1]
    assert d["T_upper"] == pytest.approx(math.sqrt(2000))


# -- properties --------------------------------------------------------------

exterior = st.tuples(st.floats(-3, 3), st.floats(-3, 3)).filter(
    lambda p: not (-0.05 <= p[0] <= 1.05 and -0.05 <= p[1] <= 1.05))


@settings(max_examples=60, deadline=None)
@given(exterior)
def test_radii_match_brute_force_square(x0):
    dom = DomainSpec.rectangle((0, 0), (1, 1), x0, 0.5)
    h = 2e-3
    R0, R1 = radii(dom)
    b0, b1 = brute_force_radii(dom, h)
    assert abs(R0 - b0) <= h and abs(R1 - b1) <= h


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(1.05, 4.0))
def test_radii_match_brute_force_disk(phi, d):
    center = np.array([0.3, -0.2])
    x0 = center + d * np.array([math.cos(phi), math.sin(phi)])
    dom = DomainSpec.disk(center, 1.0, x0, 0.1)
    h = 5e-3
    R0, R1 = radii(dom)
    b0, b1 = brute_force_radii(dom, h)
    assert abs(R0 - b0) <= 2 * h and abs(R1 - b1) <= 2 * h


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(1.1, 5.0), st.floats(1.01, 3.0))
def test_disk_mask_nested_under_radial_moves(phi, d, factor):
    # moving x0 radially outward never enlarges the observed set
    e = np.array([math.cos(phi), math.sin(phi)])
    near = DomainSpec.disk((0, 0), 1.0, d * e, 0.1)
    far = DomainSpec.disk((0, 0), 1.0, d * factor * e, 0.1)
    m_near = observation_boundary(near)
    m_far = observation_boundary(far)
    assert np.all(m_near | ~m_far)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 10), st.floats(1.001, 3.0), st.floats(0.01, 0.99), st.floats(0, 1))
def test_window_points_satisfy_inequalities(R0, ratio, frac, pos):
    R1 = R0 * ratio
    c = select_c(R0, R1, "midpoint") if frac > 0.5 else frac * critical_c(R0, R1)
    win = admissible_time_window(R0, R1, c)
    assert not win.empty
    margin = 1e-9 * (win.upper - win.lower)
    T = win.lower + margin + pos * (win.upper - win.lower - 2 * margin)
    assert time_conditions_hold(R0, R1, c, T)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 10), st.floats(1.0001, 10.0))
def test_midpoint_passes_validation(R0, ratio):
    R1 = R0 * ratio
    c = select_c(R0, R1, "midpoint")
    assert select_c(R0, R1, c) == c
