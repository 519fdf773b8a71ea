import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radialred.expr import (DomainError, ExprSyntaxError, NonDifferentiableError,
                            UnboundVariableError, UnknownIdentifierError, differentiate,
                            evaluate, parse, to_text)


def test_schrodinger_nonlinearity_with_bound_parameter():
    f = parse("y - abs(y)^(p-1)*y", {"p": 3})
    assert f.free_vars() == {"y"}
    for y in (-2.0, -0.5, 0.0, 0.7, 3.0):
        assert f.evaluate(y=y) == pytest.approx(y - abs(y) ** 2 * y, rel=1e-15, abs=1e-300)


def test_negative_power_nonlinearity():
    f = parse("b0 * y^(-sigma)", {"b0": 1.0, "sigma": 0.5})
    assert f.evaluate(y=4.0) == pytest.approx(0.5)


def test_syntax_error_position():
    with pytest.raises(ExprSyntaxError) as exc:
        parse("1 +")
    assert exc.value.position == 3


def test_unknown_identifier_names_it():
    with pytest.raises(UnknownIdentifierError) as exc:
        parse("y + lam")
    assert exc.value.name == "lam"


def test_examples_from_evaluation():
    assert parse("y - abs(y)^2*y").evaluate(y=1.0) == 0.0
    with pytest.raises(DomainError):
        parse("y^(-0.5)").evaluate(y=0.0)
    assert abs(parse("sin(r)/r").evaluate(r=math.pi)) < 1e-15


def test_unbound_variable():
    with pytest.raises(UnboundVariableError):
        parse("r + y").evaluate(r=1.0)


@pytest.mark.parametrize("text, bad", [("log(y)", 0.0), ("1/y", 0.0), ("y^(-2)", 0.0),
                                       ("sqrt(y)", -1.0), ("log(y)", -3.0)])
def test_domain_errors_never_leak_nonfinite(text, bad):
    e = parse(text)
    with pytest.raises(DomainError) as exc:
        e.evaluate(y=bad)
    assert exc.value.subexpr is not None
    with pytest.raises(DomainError):
        e.scalar(y=bad)


def test_vectorised_domain_error_reports_index():
    with pytest.raises(DomainError) as exc:
        parse("log(y)").evaluate(y=np.array([1.0, 2.0, 0.0, 3.0]))
    assert exc.value.index == 2


def test_precedence_and_associativity():
    assert parse("2^3^2").evaluate() == 2.0 ** 9
    assert parse("-2^2").evaluate() == -4.0
    assert parse("8/4/2").evaluate() == 1.0
    assert parse("1-2-3").evaluate() == -4.0
    assert parse("2*pi").evaluate() == 2 * math.pi
    assert parse("e").evaluate() == math.e


def test_derivative_examples():
    d = differentiate(parse("y - abs(y)^2*y"), "y")
    assert d.evaluate(y=2.0) == pytest.approx(-11.0)
    assert to_text(parse("sin(r)").diff("r")) == "cos(r)"
    d = parse("b0*y^(-sigma)", {"b0": 1.0, "sigma": 0.5}).diff("y")
    assert d.evaluate(y=1.0) == pytest.approx(-0.5)


def test_abs_derivative_at_kink_is_reported():
    d = parse("abs(y)").diff("y")
    assert d.evaluate(y=-3.0) == -1.0
    with pytest.raises(NonDifferentiableError):
        d.evaluate(y=0.0)


def test_min_max_tie_uses_first_argument():
    d = parse("min(y, 1)").diff("y")
    assert d.evaluate(y=1.0) == 1.0
    assert d.evaluate(y=2.0) == 0.0
    d = parse("max(1, y)").diff("y")
    assert d.evaluate(y=1.0) == 0.0


def test_scalar_path_matches_vector_path():
    e = parse("exp(-r)*y^2 + sinh(r)*cos(y) - pow(r, 1.5)/(1+abs(y))")
    for r, y in [(0.3, -1.2), (2.0, 0.5), (5.5, 3.0)]:
        assert e.scalar(r=r, y=y) == pytest.approx(float(e.evaluate(r=r, y=y)), rel=1e-15)


def test_printed_derivative_reparses():
    d = parse("min(y, r)*abs(y) + max(y^2, 1)").diff("y")
    again = parse(to_text(d))
    for r, y in [(0.5, 2.0), (3.0, -0.7)]:
        assert again.evaluate(r=r, y=y) == pytest.approx(d.evaluate(r=r, y=y), rel=1e-15)


# -- property tests ---------------------------------------------------------

SMOOTH_CORPUS = ["y - abs(y)^2*y", "sin(r)*y^3", "exp(-r*y)", "cosh(r)/(1+y^2)",
                 "log(2+r)*sqrt(1+y^2)", "pow(1+r^2, 0.5)*tan(y/4)", "r^2*y - y/r",
                 "sinh(y)*cos(r)"]

leaf = st.sampled_from(["r", "y", "1", "2.5", "pi", "0.5"])


def _combine(children):
    binop = st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(
        lambda t: f"({t[0]}) {t[1]} ({t[2]})")
    unary = st.tuples(st.sampled_from(["sin", "cos", "exp", "-"]), children).map(
        lambda t: f"{t[0]}({t[1]})" if t[0] != "-" else f"-({t[1]})")
    return binop | unary


expressions = st.recursive(leaf, _combine, max_leaves=8)
points = st.tuples(st.floats(0.1, 3.0), st.floats(-2.0, 2.0))


@settings(max_examples=100, deadline=None)
@given(expressions, points)
def test_print_parse_round_trip(text, pt):
    e = parse(text)
    again = parse(to_text(e))
    r, y = pt
    a, b = e.evaluate(r=r, y=y), again.evaluate(r=r, y=y)
    assert b == pytest.approx(a, rel=1e-15, abs=1e-300)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(SMOOTH_CORPUS), st.floats(0.2, 2.0), st.floats(-1.5, 1.5))
def test_symbolic_derivative_matches_central_difference(text, r, y):
    e = parse(text)
    h = 1e-6
    for var in ("r", "y"):
        d = float(e.diff(var).evaluate(r=r, y=y))
        plus = dict(r=r, y=y)
        minus = dict(r=r, y=y)
        plus[var] += h
        minus[var] -= h
        fd = (float(e.evaluate(**plus)) - float(e.evaluate(**minus))) / (2 * h)
        assert d == pytest.approx(fd, rel=1e-5, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(SMOOTH_CORPUS), st.floats(0.2, 2.0), st.floats(-1.5, 1.5))
def test_mixed_partials_commute(text, r, y):
    e = parse(text)
    ry = float(e.diff("r").diff("y").evaluate(r=r, y=y))
    yr = float(e.diff("y").diff("r").evaluate(r=r, y=y))
    assert ry == pytest.approx(yr, rel=1e-10, abs=1e-12)


VALID = ["y - abs(y)^(2)*y", "sin(r)/r", "b0*y^(-0.5)", "min(y, max(r, 1))", "exp(-(r+1)^2)"]


@pytest.mark.parametrize("text", VALID)
def test_truncations_are_rejected_cleanly(text):
    for k in range(len(text)):
        prefix = text[:k]
        try:
            parse(prefix, {"b0": 1.0})
        except ExprSyntaxError:
            pass
        except UnknownIdentifierError:
            pass


def test_evaluate_function_form():
    assert evaluate(parse("r*y"), {"r": 2.0}, y=3.0) == 6.0
