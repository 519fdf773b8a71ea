import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radialred import geometry as geo
from radialred.expr import parse
from radialred.reduction import (REDUCED, TRANSFORMED, DivergenceError,
                                 build_change_of_variables, default_base_point, g_theta,
                                 reduce, rho, rho_infinity, transform)

E2 = geo.model_space("euclidean", 2)
E3 = geo.model_space("euclidean", 3)
S2 = geo.model_space("sphere", 2)
W3 = geo.warped_r3()


def test_reduced_coefficients():
    r = np.linspace(0.1, 3.0, 9)
    np.testing.assert_allclose(reduce(E2, "y").drift(r), 1 / r, rtol=1e-14)
    np.testing.assert_allclose(reduce(S2, "y").drift(r), 1 / np.tan(r), rtol=1e-13)
    assert np.all(reduce(W3, "y").drift(r) == 0.0)
    assert reduce(E2, "y").form == REDUCED


def test_reduce_rejects_angular_dependence():
    with pytest.raises(ValueError, match="non-radial"):
        reduce(E2, "y*t")


def test_cov_euclidean_three_closed_form():
    cov = build_change_of_variables(E3, 1.0)
    r = np.array([0.2, 0.5, 1.0, 3.0, 30.0])
    np.testing.assert_allclose(cov.forward(r), (1 - 1 / r) / (4 * math.pi), rtol=1e-10, atol=1e-14)
    assert cov.c1 == -math.inf and cov.c1_status == "infinite"
    assert cov.c2 == pytest.approx(1 / (4 * math.pi), rel=1e-9)
    assert cov.c2_status == "finite"


def test_cov_plane_is_logarithmic():
    cov = build_change_of_variables(E2, 1.0)
    r = np.array([1e-3, 0.1, 2.0, 50.0])
    np.testing.assert_allclose(cov.forward(r), np.log(r) / (2 * math.pi), rtol=1e-10)
    assert (cov.c1, cov.c2) == (-math.inf, math.inf)


def test_cov_warped_is_linear():
    cov = build_change_of_variables(W3, 0.0)
    z = np.array([-7.0, -1.0, 0.5, 12.0])
    np.testing.assert_allclose(cov.forward(z), z / math.pi, rtol=1e-12)
    assert (cov.c1, cov.c2) == (-math.inf, math.inf)


def test_cov_cylinder_is_finite():
    cov = build_change_of_variables(geo.cylinder(), 0.5)
    assert cov.finite
    assert cov.c1 == pytest.approx(-1 / (4 * math.pi), rel=1e-9)
    assert cov.c2 == pytest.approx(1 / (4 * math.pi), rel=1e-9)


def test_default_base_point():
    assert default_base_point(0.0, math.pi) == pytest.approx(math.pi / 2)
    assert default_base_point(0.0, math.inf) == 1.0
    assert default_base_point(-math.inf, math.inf) == 0.0
    with pytest.raises(ValueError):
        build_change_of_variables(S2, 4.0)


def test_cov_rejects_interior_zero():
    g = geo.from_volume_expression("abs(r - 1) + 0*r", 0.5, 2.0)
    with pytest.raises(ValueError):
        build_change_of_variables(g, 0.75)


def test_transformed_coefficients():
    cov = build_change_of_variables(W3, 0.0)
    ode = transform(reduce(W3, "1"), cov)
    assert ode.form == TRANSFORMED and ode.coordinate == "s"
    np.testing.assert_allclose(ode.weight(np.array([-2.0, 0.0, 3.0])), math.pi ** 2, rtol=1e-14)
    # z(s) = s is harmonic for every geometry
    for g in (E2, S2, geo.cylinder()):
        c = build_change_of_variables(g)
        o = transform(reduce(g, "0"), c)
        s = np.linspace(0.9 * max(c.c1, -1), 0.9 * min(c.c2, 1), 7)
        assert np.all(o.residual(s, s, np.ones_like(s), np.zeros_like(s)) == 0)


def test_plane_harmonic_functions_from_straight_lines():
    # z = alpha + beta s  <->  u = alpha + beta ln(r) / (2 pi)
    ode = reduce(E2, "0")
    alpha, beta = 0.3, -1.7
    r = np.linspace(0.05, 20.0, 50)
    u = alpha + beta * np.log(r) / (2 * math.pi)
    du = beta / (2 * math.pi * r)
    d2u = -beta / (2 * math.pi * r ** 2)
    assert np.max(np.abs(ode.residual(r, u, du, d2u))) < 1e-12


def test_rho_examples():
    sq = geo.sqrt_profile_surface()
    r = np.array([1e-4, 0.3, 2.0, 9.0])
    np.testing.assert_allclose(rho(sq, 0.0, r), np.sqrt(r) / math.pi, rtol=1e-10)
    cyl = geo.cylinder()
    np.testing.assert_allclose(rho(cyl, 0.0, np.array([0.2, 0.7])),
                               np.array([0.2, 0.7]) / (2 * math.pi), rtol=1e-10)
    with pytest.raises(DivergenceError):
        rho(E2, 0.0, 1.0)
    assert rho_infinity(sq, 0.0) == math.inf


def test_g_theta_examples():
    assert g_theta(1.0, 0.0, 1.0, 0.5) == 0.5
    assert g_theta(2.0, 0.0, 1.0, 0.25) == 0.5
    assert g_theta(1.0, 0.0, 2.0, 0.5) == 0.25
    with pytest.raises(ValueError):
        g_theta(1.0, -math.inf, 0.0, -1.0)


# -- property tests ---------------------------------------------------------

GEOMS = [E2, E3, S2, W3, geo.model_space("hyperbolic", 2), geo.sqrt_profile_surface(),
         geo.cylinder(), geo.paraboloid()]


def _sample(g, u):
    lo = g.lo if math.isfinite(g.lo) else -8.0
    hi = g.hi if math.isfinite(g.hi) else lo + 8.0
    return lo + (hi - lo) * (0.02 + 0.96 * np.asarray(u))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(range(len(GEOMS))),
       st.lists(st.floats(0.0, 1.0), min_size=3, max_size=12))
def test_cov_monotone_and_invertible(k, us):
    g = GEOMS[k]
    cov = build_change_of_variables(g)
    r = np.unique(_sample(g, np.round(us, 6)))
    s = cov.forward(r)
    if len(r) > 1:
        assert np.all(np.diff(s) > 0)
    np.testing.assert_allclose(cov.inverse(s), r, rtol=1e-10, atol=1e-12)
    assert abs(cov.forward(cov.r0)) < 1e-14


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(range(len(GEOMS))), st.floats(0.0, 1.0),
       st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_reduced_and_self_adjoint_forms_agree(k, u, a, b, c):
    g = GEOMS[k]
    ode = reduce(g, "y - abs(y)^2*y + sin(r)")
    r = float(_sample(g, u))
    # test function a + b r + c r^2
    uu, du, d2u = a + b * r + c * r * r, b + 2 * c * r, 2 * c
    lhs = ode.self_adjoint_residual(r, uu, du, d2u)
    rhs = g.A(r) * ode.residual(r, uu, du, d2u)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9 * g.A(r) * (1 + abs(uu) ** 3))


def test_chain_rule_of_the_substitution():
    # dz/ds = u'(r) A(r) with z(s) = u(r(s)); u = r^2 on the sphere
    cov = build_change_of_variables(S2)
    s = np.linspace(0.8 * cov.c1 if math.isfinite(cov.c1) else -2, 2.0, 11)
    h = 1e-6
    z = lambda x: cov.inverse(x) ** 2
    dz = (z(s + h) - z(s - h)) / (2 * h)
    r = cov.inverse(s)
    np.testing.assert_allclose(dz, 2 * r * S2.A(r), rtol=1e-6)


def test_parse_objects_accepted():
    ode = reduce(E2, parse("y"))
    assert ode.f_at(1.0, 2.0) == 2.0
