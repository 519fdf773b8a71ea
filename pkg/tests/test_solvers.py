import math

import numpy as np
import pytest

from radialred import geometry as geo
from radialred.hypotheses import FALSIFIED, VERIFIED
from radialred.reduction import build_change_of_variables, reduce, rho, transform
from radialred.solvers import (BVP_SHOOTING, IVP, PICARD_NEGATIVE_POWER, PICARD_SUBLINEAR,
                               POLE_SERIES, CollapseError, RadialSolution,
                               check_completeness_bounds, check_nonexistence, picard_residual,
                               solve_bvp_singular, solve_from_pole, solve_ivp,
                               solve_ivp_transformed, solve_picard_negative_power,
                               solve_picard_sublinear)
from radialred.verify import ode_residual

E2 = geo.model_space("euclidean", 2)
E3 = geo.model_space("euclidean", 3)
S2 = geo.model_space("sphere", 2)
W3 = geo.warped_r3()
SQ = geo.sqrt_profile_surface()
CYL = geo.cylinder()


# -- RadialSolution ---------------------------------------------------------

def test_dense_output_reproduces_nodes():
    g = np.array([0.0, 0.5, 1.3, 2.0])
    sol = RadialSolution("r", g, np.sin(g), np.cos(g), IVP)
    np.testing.assert_array_equal(sol(g), np.sin(g))
    np.testing.assert_allclose(sol.derivative(g), np.cos(g), rtol=0, atol=1e-15)
    assert sol.interpolation == "cubic_hermite"
    sol5 = RadialSolution("r", g, np.sin(g), np.cos(g), IVP, second=-np.sin(g))
    assert sol5.interpolation == "quintic_hermite"
    np.testing.assert_allclose(sol5.second_derivative(g), -np.sin(g), atol=1e-14)


def test_solution_validates_grid():
    with pytest.raises(ValueError):
        RadialSolution("r", [0.0, 0.0], [1, 1], [0, 0], IVP)
    with pytest.raises(ValueError):
        RadialSolution("r", [0.0, 1.0], [1, np.nan], [0, 0], IVP)


# -- IVPs -------------------------------------------------------------------

def _sinc(r):
    return np.where(r == 0, 1.0, np.sin(r) / np.where(r == 0, 1.0, r))


def test_sinc_from_pole():
    # u'' + (2/r) u' + u = 0, u(0) = 1  ->  sin(r)/r
    sol = solve_from_pole(E3, "y", 1.0, (0.0, 10.0), 1e-8)
    assert sol.provenance == POLE_SERIES
    assert sol.grid[0] == 0.0 and sol.values[0] == 1.0 and sol.derivatives[0] == 0.0
    r = np.linspace(0.0, 10.0, 2001)
    assert np.max(np.abs(sol(r) - _sinc(r))) < 1e-6
    assert ode_residual(sol, reduce(E3, "y"), np.linspace(0.01, 10, 997)) < 1e-5


def test_cos_on_sphere_from_equator():
    ode = reduce(S2, "2*y")
    sol = solve_ivp(ode, math.pi / 2, 0.0, -1.0, (1e-3, math.pi - 1e-3), 1e-8)
    r = np.linspace(1e-3, math.pi - 1e-3, 2001)
    assert np.max(np.abs(sol(r) - np.cos(r))) < 1e-6
    assert ode_residual(sol, ode, r[1:-1]) < 1e-5


def test_cos_on_sphere_from_pole():
    sol = solve_from_pole(S2, "2*y", 1.0, (0.0, 3.0), 1e-8)
    r = np.linspace(0.0, 3.0, 1001)
    assert np.max(np.abs(sol(r) - np.cos(r))) < 1e-6


@pytest.mark.parametrize("g", [E2, S2, W3, SQ, CYL])
def test_constant_data_with_zero_forcing_stays_constant(g):
    cov = build_change_of_variables(g)
    lo, hi = cov.inverse(np.array([max(cov.c1, -2.0), min(cov.c2, 2.0)]) * 0.9)
    sol = solve_ivp(reduce(g, "0"), cov.r0, 2.5, 0.0, (lo, hi), 1e-8)
    assert np.all(sol.values == 2.5) and np.all(sol.derivatives == 0.0)


def test_pole_start_with_zero_forcing():
    sol = solve_from_pole(S2, "0", 0.7, (0.0, 3.0), 1e-8)
    assert np.all(sol.values == 0.7)


def test_pole_series_consistency():
    f0 = 2.0 * 1.3
    sol = solve_from_pole(S2, "2*y", 1.3, (0.0, 2.0), 1e-10, eps=1e-3)
    eps = sol.info["eps"]
    assert abs(sol.derivative(eps)) <= (abs(f0) / 2) * eps * 1.1


def test_warped_transformed_closed_form():
    cov = build_change_of_variables(W3, 0.0)
    sol = solve_ivp_transformed(transform(reduce(W3, "1"), cov), 0.0, 0.0, 0.0, (-2.0, 3.0), 1e-8)
    s = np.linspace(-2, 3, 501)
    np.testing.assert_allclose(sol(s), -math.pi ** 2 * s ** 2 / 2, atol=1e-10)


def test_free_motion_in_s():
    cov = build_change_of_variables(E2)
    sol = solve_ivp_transformed(transform(reduce(E2, "0"), cov), 0.5, 1.0, -0.4, (-3.0, 4.0))
    s = np.linspace(-3, 4, 101)
    np.testing.assert_allclose(sol(s), 1.0 - 0.4 * (s - 0.5), atol=1e-13)


def test_plane_r_and_s_solves_agree():
    cov = build_change_of_variables(E2, 1.0)
    ode = reduce(E2, "y")
    sr = solve_ivp(ode, 1.0, 1.0, 0.3, (0.5, 3.0), 1e-10)
    w = (float(cov.forward(0.5)), float(cov.forward(3.0)))
    ss = solve_ivp_transformed(transform(ode, cov), 0.0, 1.0, 0.3 * 2 * math.pi, w, 1e-10)
    r = np.linspace(0.5, 3.0, 400)
    assert np.max(np.abs(sr(r) - ss(cov.forward(r)))) < 1e-6
    assert np.max(np.abs(sr.derivative(r) * E2.A(r) - ss.derivative(cov.forward(r)))) < 1e-6


def test_window_validation():
    with pytest.raises(ValueError):
        solve_ivp(reduce(S2, "y"), 1.0, 1.0, 0.0, (0.0, 2.0))
    with pytest.raises(ValueError):
        solve_ivp(reduce(S2, "y"), 2.5, 1.0, 0.0, (0.5, 2.0))
    with pytest.raises(ValueError):
        solve_from_pole(W3, "y", 1.0, (0.0, 1.0))
    with pytest.raises(ValueError):
        solve_from_pole(SQ, "y", 1.0, (0.0, 1.0))


def test_blowup_is_flagged_with_location():
    # z'' = pi^2 z^3, z(0) = 1, z'(0) = pi/sqrt(2): z = 1/(1 - pi s/sqrt(2))
    cov = build_change_of_variables(W3, 0.0)
    ode = transform(reduce(W3, "-y^3"), cov)
    s_star = math.sqrt(2) / math.pi
    sol = solve_ivp(ode, 0.0, 1.0, math.pi / math.sqrt(2), (-0.5, 2.0), 1e-8)
    assert sol.info["blowup"]
    assert sol.info["blowup_forward_at"] == pytest.approx(s_star, abs=1e-3)
    assert sol.window[1] < s_star
    assert sol.window[0] == -0.5


def test_convergence_order_on_sinc():
    ode = reduce(E3, "y")
    r = np.linspace(1.0, 10.0, 3001)
    errs, steps = [], []
    for tol in (1e-6, 1e-8, 1e-10):
        sol = solve_ivp(ode, 1.0, math.sin(1.0), math.cos(1.0) - math.sin(1.0), (1.0, 10.0), tol)
        errs.append(np.max(np.abs(sol(r) - np.sin(r) / r)))
        steps.append(sol.info["steps"])
    orders = [math.log(e0 / e1) / math.log(n1 / n0)
              for e0, e1, n0, n1 in zip(errs, errs[1:], steps, steps[1:])]
    assert min(orders) >= 3.8, (errs, steps, orders)


def test_damped_oscillator_energy_decreases():
    # u'' + (2/r) u' + lam u = 0:  E = u'^2/2 + lam u^2/2 has dE/dr = -(2/r) u'^2
    lam = 3.0
    sol = solve_ivp(reduce(E3, f"{lam}*y"), 0.5, 1.0, 0.2, (0.5, 12.0), 1e-10)
    E = 0.5 * sol.derivatives ** 2 + 0.5 * lam * sol.values ** 2
    assert np.all(np.diff(E) <= 1e-12)


# -- singular two-point problem ---------------------------------------------

def _cyl_cov():
    return build_change_of_variables(CYL, 0.5)


def test_bvp_regular_closed_form():
    sol = solve_bvp_singular(CYL, _cyl_cov(), "1", 1, 0, 1, 0, 1e-10)
    t, w = sol.info["t"], sol.info["w"]
    np.testing.assert_allclose(w, t * (1 - t) / 2, atol=1e-12)
    assert sol.provenance == BVP_SHOOTING and sol.coordinate == "s"


def test_bvp_singular_negative_power():
    cov = _cyl_cov()
    sol = solve_bvp_singular(CYL, cov, "y^(-0.5)", 1, 0, 1, 0, 1e-10)
    t, w = sol.info["t"], sol.info["w"]
    assert np.all(w[1:-1] > 0)
    assert max(sol.info["boundary_residuals"]) < 1e-8
    # symmetry of the data -> w(t) = w(1 - t)
    tt = np.linspace(0, 1, 1001)
    W = lambda x: sol(cov.c1 + (cov.c2 - cov.c1) * x)
    assert np.max(np.abs(W(tt) - W(1 - tt))) < 1e-8
    # interior residual on the unit interval, where A~ = 1: w'' + w^(-1/2) = 0
    L = cov.c2 - cov.c1
    s = cov.c1 + L * np.linspace(0.05, 0.95, 301)
    unit = np.abs(sol.second_derivative(s) * L ** 2 + sol(s) ** -0.5)
    assert np.max(unit) < 1e-6
    # the s-form carries the factor 1/L^2
    ode = transform(reduce(CYL, "y^(-0.5)"), cov)
    assert ode_residual(sol, ode, s) == pytest.approx(np.max(unit) / L ** 2, rel=1e-6)


def test_bvp_rejects_degenerate_coefficients():
    with pytest.raises(ValueError):
        solve_bvp_singular(CYL, _cyl_cov(), "1", 0, 0, 0, 0)
    with pytest.raises(ValueError):
        solve_bvp_singular(CYL, _cyl_cov(), "1", -1, 0, 1, 0)


def test_bvp_robin_data():
    # w'' = -1, w(0) - w'(0) = 0, w(1) + w'(1) = 0  ->  w = -t^2/2 + t/2 + 1/2 (hand solved)
    sol = solve_bvp_singular(CYL, _cyl_cov(), "1", 1, 1, 1, 1, 1e-10)
    t, w = sol.info["t"], sol.info["w"]
    np.testing.assert_allclose(w, -t ** 2 / 2 + t / 2 + 0.5, atol=1e-10)


# -- Picard -------------------------------------------------------------------

def test_picard_zero_forcing_is_c_rho():
    sol = solve_picard_sublinear(SQ, "0", 0.0, 1.0, 1e-10)
    assert sol.provenance == PICARD_SUBLINEAR
    np.testing.assert_allclose(sol.values, np.sqrt(sol.grid) / math.pi, rtol=1e-12, atol=1e-14)
    assert sol.info["iterations"] <= 2


def test_picard_sublinear_small_perturbation():
    tol = 1e-10
    sol = solve_picard_sublinear(SQ, "1e-3*y*exp(-r^2)", 0.0, 1.0, tol)
    assert picard_residual(SQ, sol) <= 10 * tol
    assert 0 < sol.info["c_limit"] < math.inf
    assert abs(sol.info["limit_at_a"]) < 1e-6


def test_picard_negative_power_compact_support():
    b = "max(0, 1 - 16*(r-1.5)^2)"
    tol = 1e-10
    sol = solve_picard_negative_power(SQ, b, 1.0, 0.0, tol, breakpoints=(1.25, 1.75))
    assert sol.provenance == PICARD_NEGATIVE_POWER
    assert np.all(sol.values > 0)
    assert picard_residual(SQ, sol) <= 10 * tol
    ratio = sol.values / sol.info["rho"]
    tail = sol.grid > 1.75
    assert np.all(np.diff(ratio[tail]) < 0)


def test_picard_negative_power_scaling_law():
    b = "max(0, 1 - 16*(r-1.5)^2)"
    s1 = solve_picard_negative_power(SQ, b, 1.0, 0.0, 1e-11, breakpoints=(1.25, 1.75))
    s4 = solve_picard_negative_power(SQ, f"4*({b})", 1.0, 0.0, 1e-11, breakpoints=(1.25, 1.75))
    np.testing.assert_allclose(s4.values, 2.0 * s1.values, rtol=1e-6)


def test_picard_negative_power_zero_mass_collapses():
    with pytest.raises(CollapseError):
        solve_picard_negative_power(SQ, "0", 1.0, 0.0)


def test_picard_needs_integrable_inverse_volume():
    with pytest.raises(ValueError):
        solve_picard_sublinear(E3, "0", 0.0, 1.0)


# -- nonexistence and completeness ------------------------------------------

def _candidate(f, z0, dz0, s0=0.0):
    cov = build_change_of_variables(E2, 1.0)
    ode = transform(reduce(E2, f), cov)
    return cov, solve_ivp(ode, s0, z0, dz0, (s0 - 0.5, s0 + 0.5), 1e-10)


def test_nonexistence_plane_with_unit_forcing():
    cov, cand = _candidate("1", 1.0, 0.2)
    rep = check_nonexistence(E2, cov, "1", cand)
    assert rep.horn == "negativity"
    assert rep.concavity_verified
    assert rep.window_length <= 1e3


def test_nonexistence_constant_horn():
    cov, cand = _candidate("0", 2.0, 0.0)
    rep = check_nonexistence(E2, cov, "0", cand)
    assert rep.horn == "constant"


def test_nonexistence_affine_candidate_crosses_at_minus_z0():
    cov, cand = _candidate("0", 0.8, 1.0)
    rep = check_nonexistence(E2, cov, "0", cand)
    assert rep.horn == "negativity"
    assert rep.crossing_s == pytest.approx(-0.8, abs=1e-9)


def test_nonexistence_needs_full_line():
    cov = build_change_of_variables(CYL, 0.5)
    with pytest.raises(ValueError):
        check_nonexistence(CYL, cov, "1", None)


def test_completeness_bounds():
    window = ((0.5, 2.0), (-1.0, 1.0), (-0.5, 0.5))
    rep = check_completeness_bounds("t", E2, "1", window, 1.0)
    assert rep.verdict == VERIFIED
    assert rep.diagnostics["max_time_ratio"] == pytest.approx(1.0)
    assert rep.diagnostics["max_position_term"] == 0.0
    assert rep.diagnostics["properness_checked"] is False
    rep = check_completeness_bounds("x1", E2, "1", window, 0.5)
    assert rep.verdict == VERIFIED
    assert rep.diagnostics["max_position_ratio"] == pytest.approx(1.0)
    rep = check_completeness_bounds("x1", E2, "1", window, 0.4)
    assert rep.verdict == FALSIFIED and rep.witness["bound"] == 2
    assert abs(rep.witness["x2"]) > 0.4
    # phi = x2: |x2 A' + A f| <= C A, i.e. |x2/r + 1| <= C on the plane
    rep = check_completeness_bounds("x2", E2, "1", window, 3.0)
    assert rep.verdict == VERIFIED
    assert rep.diagnostics["max_velocity_ratio"] == pytest.approx((1 + 0.5 / 0.5) / 3.0)
    rep = check_completeness_bounds("x2", E2, "1", window, 1.5)
    assert rep.verdict == FALSIFIED and rep.witness["bound"] == 3


def test_nonexistence_crossing_inside_the_candidate():
    # steep data: z'' = -4 pi^2 exp(4 pi s) turns negative within the candidate's window
    cov, cand = _candidate("1", 1.4, -1.55, s0=0.67)
    rep = check_nonexistence(E2, cov, "1", cand)
    assert rep.horn == "negativity" and rep.diagnostics["located_on"] == "candidate"
    e = lambda t: math.exp(4 * math.pi * t)
    s0, x = 0.67, rep.crossing_s
    z = 1.4 - 1.55 * (x - s0) - (e(x) - e(s0) - 4 * math.pi * e(s0) * (x - s0)) / 4
    assert abs(z) < 1e-8
    assert cand.window[0] < x < cand.window[1]


def test_nonexistence_negative_candidate():
    cov, cand = _candidate("1", -1.0, 0.0)
    rep = check_nonexistence(E2, cov, "1", cand)
    assert rep.horn == "negativity" and rep.crossing_s is None
