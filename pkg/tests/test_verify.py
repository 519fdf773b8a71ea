import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radialred import geometry as geo
from radialred.expr import parse
from radialred.reduction import build_change_of_variables, reduce, transform
from radialred.solvers import RadialSolution, IVP, solve_ivp, solve_ivp_transformed
from radialred.verify import (CertificateError, convergence_ladder, coordinate_consistency,
                              lift_and_residual, lipschitz_on, ode_residual, residual_method,
                              revolution_mesh, uniqueness_contract)

E2 = geo.model_space("euclidean", 2)
S2 = geo.model_space("sphere", 2)
W3 = geo.warped_r3()
CYL = geo.cylinder()
WCOV = build_change_of_variables(W3, 0.0)
WINDOW = (-1.0, 1.0)


def _solve_s(f, z0, dz0, tol, window=WINDOW):
    ode = transform(reduce(W3, f), WCOV)
    return solve_ivp_transformed(ode, 0.0, z0, dz0, window, tol)


# -- contraction certificate -------------------------------------------------

def test_certificate_for_identical_data_at_two_tolerances():
    s1 = _solve_s("sin(y)", 0.5, 0.2, 1e-8)
    s2 = _solve_s("sin(y)", 0.5, 0.2, 1e-10)
    cert = uniqueness_contract(s1, s2, "sin(y)", WCOV, *WINDOW, tol=1e-8, s0=0.0)
    assert cert.max_deviation <= 10 * 1e-8
    assert cert.lipschitz_const == pytest.approx(1.0, rel=1e-9)
    assert cert.M == pytest.approx(math.pi ** 2, rel=1e-9)


def test_certificate_constants_follow_their_definitions():
    s1 = _solve_s("y - abs(y)^2*y", 0.3, -0.1, 1e-9)
    s2 = _solve_s("y - abs(y)^2*y", 0.3, -0.1, 1e-11)
    cert = uniqueness_contract(s1, s2, "y - abs(y)^2*y", WCOV, *WINDOW, tol=1e-9, s0=0.0)
    assert cert.delta == 1.0 / (2.0 * (1.0 + cert.M))
    assert cert.intervals_covered * cert.delta >= WINDOW[1] - WINDOW[0]
    # kappa is the sup of |z|, C = sup |1 - 3y^2| on [-kappa, kappa]
    grid = np.linspace(*WINDOW, 4001)
    kappa = max(np.max(np.abs(s1(grid))), np.max(np.abs(s2(grid))))
    assert cert.kappa == pytest.approx(kappa, rel=1e-6)
    assert cert.lipschitz_const == pytest.approx(max(1.0, abs(1 - 3 * kappa ** 2)), rel=1e-3)
    assert cert.M == pytest.approx(cert.lipschitz_const * math.pi ** 2, rel=1e-12)
    d = cert.to_dict()
    assert {"s0", "kappa", "lipschitz_const", "M", "delta", "intervals_covered",
            "max_deviation"} <= set(d)


def test_certificate_with_perturbed_data_stays_inside_gronwall_envelope():
    eps = 1e-6
    s1 = _solve_s("sin(y)", 0.5, 0.2, 1e-11)
    s2 = _solve_s("sin(y)", 0.5 + eps, 0.2, 1e-11)
    cert = uniqueness_contract(s1, s2, "sin(y)", WCOV, *WINDOW, tol=2 * eps, s0=0.0)
    assert cert.max_deviation <= 1.1 * cert.gronwall_envelope(eps)
    assert cert.max_deviation >= eps


def test_certificate_when_f_does_not_depend_on_y():
    # the difference solves w'' = 0: w = eps (s - s0)
    eps = 1e-6
    s1 = _solve_s("1", 0.0, 0.0, 1e-10)
    s2 = _solve_s("1", 0.0, eps, 1e-10)
    s = np.linspace(*WINDOW, 201)
    np.testing.assert_allclose(s2(s) - s1(s), eps * s, rtol=0, atol=1e-13)
    cert = uniqueness_contract(s1, s2, "1", WCOV, *WINDOW, tol=2 * eps, s0=0.0)
    assert cert.lipschitz_const == 0.0 and cert.M == 0.0 and cert.delta == 0.5
    assert cert.max_deviation == pytest.approx(eps * 2.0, rel=1e-6)


def test_zero_solution_rigidity():
    f = "y - abs(y)^2*y"
    zero = _solve_s(f, 0.0, 0.0, 1e-8)
    assert np.all(zero.values == 0.0)
    cert = uniqueness_contract(zero, zero, f, WCOV, *WINDOW, tol=1e-8)
    assert cert.max_deviation == 0.0


def test_certificate_rejects_mismatched_start():
    s1 = _solve_s("sin(y)", 0.5, 0.2, 1e-9)
    s2 = _solve_s("sin(y)", 0.6, 0.2, 1e-9)
    with pytest.raises(CertificateError, match="do not match"):
        uniqueness_contract(s1, s2, "sin(y)", WCOV, *WINDOW, tol=1e-8, s0=0.0)


def test_certificate_breach_for_different_equations():
    s1 = _solve_s("y", 0.5, 0.2, 1e-10)
    s2 = _solve_s("2*y", 0.5, 0.2, 1e-10)
    with pytest.raises(CertificateError, match="exceeded") as exc:
        uniqueness_contract(s1, s2, "y", WCOV, *WINDOW, tol=1e-8, s0=0.0)
    assert exc.value.diagnostics["breaches"]


def test_certificate_needs_covering_s_solutions():
    s1 = _solve_s("y", 0.5, 0.2, 1e-8, window=(-0.5, 0.5))
    with pytest.raises(ValueError):
        uniqueness_contract(s1, s1, "y", WCOV, *WINDOW, tol=1e-8)
    r_sol = solve_ivp(reduce(W3, "y"), 0.0, 0.5, 0.2, (-4.0, 4.0))
    with pytest.raises(ValueError):
        uniqueness_contract(r_sol, r_sol, "y", WCOV, *WINDOW, tol=1e-8)


def test_lipschitz_on_symmetric_box():
    # |d/dy y^2| = 2|y|, largest at the box edge
    assert lipschitz_on(parse("y^2"), [0.0, 1.0], 1.5) == pytest.approx(3.0, rel=1e-12)
    assert lipschitz_on(parse("exp(-r)*y"), [0.0, 1.0, 2.0], 1.0) == pytest.approx(1.0)
    assert lipschitz_on(parse("y^2"), [0.0], 0.0) == 0.0


# -- ODE residuals and coordinate consistency --------------------------------

def test_constant_solution_has_zero_residual():
    sol = solve_ivp(reduce(S2, "0"), 1.0, 0.4, 0.0, (0.2, 3.0), 1e-8)
    r = np.linspace(0.2, 3.0, 101)
    val, method = ode_residual(sol, reduce(S2, "0"), r, details=True)
    assert val == 0.0
    assert method == "ode_rhs_at_nodes_quintic_hermite"


def test_residual_method_for_plain_tables():
    g = np.linspace(0, 1, 11)
    sol = RadialSolution("r", g, g ** 2, 2 * g, IVP)
    assert residual_method(sol) == "local_quintic_hermite_fit"
    with pytest.raises(ValueError):
        ode_residual(sol, reduce(E2, "0"), [1.5])
    with pytest.raises(ValueError):
        ode_residual(sol, transform(reduce(E2, "0"), build_change_of_variables(E2)), [0.5])


@pytest.mark.parametrize("g, r0, window", [(E2, 1.0, (0.5, 3.0)),
                                           (S2, math.pi / 2, (0.4, 2.6)),
                                           (W3, 0.0, (-2.0, 2.0))])
def test_coordinate_consistency(g, r0, window):
    cov = build_change_of_variables(g, r0)
    ode = reduce(g, "y")
    sr = solve_ivp(ode, r0, 1.0, 0.3, window, 1e-10)
    sw = tuple(float(x) for x in cov.forward(np.array(window)))
    ss = solve_ivp_transformed(transform(ode, cov), 0.0, 1.0, 0.3 * float(g.A(r0)), sw, 1e-10)
    d0, d1 = coordinate_consistency(sr, ss, cov, np.linspace(*window, 301))
    assert d0 < 1e-6 and d1 < 1e-6


def test_coordinate_consistency_constant():
    cov = build_change_of_variables(E2, 1.0)
    sr = solve_ivp(reduce(E2, "0"), 1.0, 2.0, 0.0, (0.5, 3.0))
    ss = solve_ivp_transformed(transform(reduce(E2, "0"), cov), 0.0, 2.0, 0.0, (-0.2, 0.2))
    assert coordinate_consistency(sr, ss, cov, np.linspace(0.6, 1.3, 51)) == (0.0, 0.0)


def test_coordinate_consistency_warped_closed_form():
    # u'' = -1 in r; z'' = -pi^2 in s = r/pi
    sr = solve_ivp(reduce(W3, "1"), 0.0, 0.0, 0.0, (-3.0, 3.0), 1e-8)
    ss = solve_ivp_transformed(transform(reduce(W3, "1"), WCOV), 0.0, 0.0, 0.0, (-1.0, 1.0), 1e-8)
    r = np.linspace(-3.0, 3.0, 301)
    np.testing.assert_allclose(sr(r), -r ** 2 / 2, atol=1e-10)
    d0, d1 = coordinate_consistency(sr, ss, WCOV, r)
    assert d0 < 1e-10 and d1 < 1e-10


# -- surface meshes ----------------------------------------------------------

@pytest.mark.parametrize("g", [S2, CYL, geo.paraboloid()])
def test_meshes_are_manifold(g):
    mesh = revolution_mesh(g, 12)
    assert mesh.is_manifold()
    counts = mesh.edge_face_counts()
    assert set(counts.values()) <= {1, 2}


def test_sphere_mesh_has_two_pole_fans():
    mesh = revolution_mesh(S2, 8, 16)
    assert len(mesh.poles) == 2 and len(mesh.boundary) == 0
    assert len(mesh.vertices) == 7 * 16 + 2
    assert len(mesh.faces) == 2 * 16 + 2 * 6 * 16
    np.testing.assert_allclose(np.linalg.norm(mesh.vertices, axis=1), 1.0, atol=1e-15)


def test_mesh_needs_a_profile():
    with pytest.raises(ValueError):
        revolution_mesh(E2, 8)


@pytest.mark.parametrize("g", [S2, CYL, geo.paraboloid(0.0, 1.5)])
def test_stiffness_symmetric_psd_and_annihilates_constants(g):
    mesh = revolution_mesh(g, 10)
    K = mesh.stiffness()
    assert abs(K - K.T).max() <= 1e-12
    assert np.max(np.abs(np.asarray(K.sum(axis=1)).ravel())) <= 1e-12
    rng = np.random.default_rng(7)
    for _ in range(20):
        v = rng.standard_normal(K.shape[0])
        assert v @ (K @ v) >= -1e-12 * (v @ v)
    np.testing.assert_allclose(mesh.apply_stiffness(np.sin(mesh.r)), K @ np.sin(mesh.r),
                               rtol=1e-10, atol=1e-12)
    assert np.all(mesh.laplacian(np.full(len(mesh.r), 3.7)) == 0.0)


@pytest.mark.parametrize("kind", ["mixed", "barycentric"])
def test_lumped_mass_sums_to_mesh_area(kind):
    mesh = revolution_mesh(S2, 16)
    assert np.sum(mesh.mass(kind)) == pytest.approx(np.sum(mesh.face_areas()), rel=1e-12)
    assert np.all(mesh.mass(kind) > 0)


def test_lift_is_constant_along_rings():
    rep = lift_and_residual(S2, np.cos, 16, None, "2*y")
    r, u = rep["vertex_r"], rep["values"]
    for ring in np.unique(r):
        vals = u[r == ring]
        assert np.all(vals == vals[0])


def test_constant_lift_has_zero_residual():
    rep = lift_and_residual(S2, lambda r: 0.0 * r + 1.5, 16, None, "0")
    assert rep["max"] == 0.0 and rep["l2"] == 0.0


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.sampled_from([6, 9, 16]))
def test_cylinder_is_exact_on_linear_functions(a, b, nr):
    rep = lift_and_residual(CYL, lambda r: a + b * r, nr, None, "0")
    assert rep["max"] <= 1e-10 * max(1.0, abs(a), abs(b))


def test_sphere_ladder_is_second_order():
    lad = convergence_ladder(S2, np.cos, "2*y", nrs=(32, 64, 128))
    assert all(np.diff(lad["l2"]) < 0)
    assert min(lad["l2_orders"]) >= 1.8
    # the pole vertices take part in the norms and stay accurate
    rep = lad["reports"][-1]
    assert np.max(np.abs(rep["residual"][rep["pole_vertices"]])) < 1e-3


def test_lift_rejects_window_mismatch():
    sol = solve_ivp(reduce(S2, "2*y"), math.pi / 2, 0.0, -1.0, (0.5, 2.5))
    with pytest.raises(ValueError, match="exceeds"):
        lift_and_residual(S2, sol, 8, None, "2*y")
    rep = lift_and_residual(S2, sol, 8, None, "2*y", r_range=(0.6, 2.4))
    assert rep["interior_vertices"] == 7 * 16
