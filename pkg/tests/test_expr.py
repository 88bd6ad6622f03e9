import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from stiffkit import expr


def ev(source, t=0.0, y=(0.0, 0.0, 0.0), **params):
    return expr.evaluate(expr.parse(source), t, y, params)


# --------------------------------------------------------------------------
# parsing and precedence


def test_robertson_component():
    node = expr.parse("-0.04*y1 + 1e4*y2*y3", dim=3)
    y = (0.5, 2e-5, 0.3)
    assert expr.evaluate(node, 0.0, y) == pytest.approx(-0.04 * 0.5 + 1e4 * 2e-5 * 0.3, rel=1e-15)


def test_single_variable():
    assert expr.parse("t") == expr.Var("t")


@pytest.mark.parametrize("source, value", [
    ("2^3^2", 512.0),  # right associative
    ("-2^2", -4.0),  # ^ binds tighter than unary minus
    ("8/4/2", 1.0),  # left associative
    ("10-4-3", 3.0),
    ("2*3+4", 10.0),
    ("2+3*4", 14.0),
    ("(2+3)*4", 20.0),
    ("2^-1", 0.5),
    ("  1 +\t2 ", 3.0),
    ("-(-3)", 3.0),
    (".5e1", 5.0),
])
def test_precedence(source, value):
    assert ev(source) == value


@pytest.mark.parametrize("source, value, kw", [
    ("sin(t)+y1^2", 4.0, dict(t=0.0, y=(2.0,))),
    ("exp(y1)*y2", 3.0, dict(y=(0.0, 3.0))),
])
def test_eval_examples(source, value, kw):
    assert expr.evaluate(expr.parse(source), kw.get("t", 0.0), kw["y"]) == value


def test_eval_parameter():
    assert ev("mu*sinh(mu*y1)", mu=1.0) == 0.0


def test_pi_constant():
    assert ev("pi") == math.pi


@pytest.mark.parametrize("source, offset", [
    ("sin(", 4),
    ("1 + $", 4),
    ("(1 + 2", 6),
    ("1 + 2)", 5),
    ("foo(1)", 0),
    ("sin(1, 2)", 5),
    ("sin + 1", 0),
    ("", 0),
])
def test_parse_errors_carry_offsets(source, offset):
    with pytest.raises(expr.ExprError) as info:
        expr.parse(source, dim=2, params=["mu"])
    assert info.value.offset == offset
    assert str(info.value).startswith(f"1:{offset + 1}: ")


def test_unknown_identifier():
    with pytest.raises(expr.ExprError, match="unknown identifier 'nu'"):
        expr.parse("nu*y1", dim=1, params=["mu"])
    with pytest.raises(expr.ExprError, match="dimension is 2"):
        expr.parse("y3", dim=2)


def test_errors_are_value_errors():
    assert issubclass(expr.ExprError, ValueError)


def test_multiline_position():
    with pytest.raises(expr.ExprError) as info:
        expr.parse("1 +\n  $")
    assert (info.value.line, info.value.col) == (2, 3)


# --------------------------------------------------------------------------
# total evaluation


@pytest.mark.parametrize("source", ["1/0", "log(0)", "log(-1)", "sqrt(-1)", "(-8)^(1/3)",
                                    "exp(1000)"])
def test_non_finite_results_propagate(source):
    assert not math.isfinite(ev(source))


def test_compiled_matches_tree_walk():
    sources = ["-y1 + mu*y2*(1-y1^2)", "tan(t)*abs(y2)", "y1^y2 - cosh(t)/tanh(y1)"]
    nodes = [expr.parse(s) for s in sources]
    fn = expr.compile_nodes(nodes)
    rng = np.random.default_rng(0)
    for _ in range(20):
        t, y = rng.uniform(0.1, 1), rng.uniform(0.2, 2, size=2)
        got = fn(t, y, {"mu": 3.0})
        want = [expr.evaluate(n, t, y, {"mu": 3.0}) for n in nodes]
        np.testing.assert_allclose(got, want, rtol=1e-14)


# --------------------------------------------------------------------------
# differentiation


def d_at(source, wrt, t=0.0, y=(0.0, 0.0), **params):
    return expr.evaluate(expr.differentiate(expr.parse(source), wrt), t, y, params)


def test_derivative_examples():
    assert d_at("exp(y1)", "y1") == 1.0
    assert d_at("y2", "y1") == 0.0
    node = expr.differentiate(expr.parse("-y1 + mu*y2*(1-y1^2)"), "y2")
    for y1 in (-2.0, 0.3, 1.7):
        assert expr.evaluate(node, 0.0, (y1, 5.0), {"mu": 7.0}) == pytest.approx(7.0 * (1 - y1 ** 2))
    assert expr.variables(node) == {"mu", "y1"}


def test_derivative_constant_folding():
    assert expr.differentiate(expr.parse("y2"), "y1") == expr.Const(0.0)
    assert expr.differentiate(expr.parse("3*t"), "y1") == expr.Const(0.0)


# Smooth expressions over the grammar.  Every function is applied to an
# argument that keeps it away from poles, branch points and kinks, so the
# central finite difference is an accurate oracle at points in [-1, 1].

_leaf = st.sampled_from(["y1", "y2", "t", "0.5", "1.3", "2"])


def _combine(children):
    binary = st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(
        lambda a: f"({a[0]} {a[1]} {a[2]})")
    quotient = st.tuples(children, children).map(lambda a: f"({a[0]}) / (1.5 + sin({a[1]}))")
    power = st.tuples(children, st.sampled_from(["2", "3", "0.5", "-1", "1.5"])).map(
        lambda a: f"(1.2 + cos({a[0]}))^{a[1]}")
    general_power = st.tuples(children, children).map(
        lambda a: f"(1.5 + sin({a[0]}))^(cos({a[1]}))")
    safe = {
        "sin": "{}", "cos": "{}", "exp": "sin({})", "sinh": "sin({})", "cosh": "sin({})",
        "tanh": "{}", "tan": "0.5*sin({})", "log": "2 + sin({})", "sqrt": "2 + cos({})",
        "abs": "2 + sin({})",
    }
    calls = st.tuples(st.sampled_from(sorted(safe)), children).map(
        lambda a: f"{a[0]}({safe[a[0]].format(a[1])})")
    neg = children.map(lambda c: f"-{c}")
    return binary | quotient | power | general_power | calls | neg


expressions = st.recursive(_leaf, _combine, max_leaves=8)
points = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))


@settings(max_examples=1000, deadline=None, derandomize=True,
          suppress_health_check=[HealthCheck.too_slow])
@given(expressions, points, st.sampled_from(["y1", "y2", "t"]))
def test_symbolic_derivative_matches_central_difference(source, point, wrt):
    node = expr.parse(source, dim=2)
    t, y1, y2 = point
    dnode = expr.differentiate(node, wrt)
    value = expr.evaluate(dnode, t, (y1, y2))

    def f(shift):
        args = {"t": t, "y1": y1, "y2": y2}
        args[wrt] += shift
        return expr.evaluate(node, args["t"], (args["y1"], args["y2"]))

    h = 1e-6
    fd = (f(h) - f(-h)) / (2 * h)
    assert math.isfinite(value)
    assert abs(value - fd) <= 1e-6 * (1 + abs(value)), (source, point, wrt)


@settings(max_examples=300, deadline=None, derandomize=True)
@given(expressions)
def test_serialize_round_trip(source):
    node = expr.parse(source, dim=2)
    assert expr.parse(expr.serialize(node), dim=2) == node


@settings(max_examples=100, deadline=None, derandomize=True)
@given(expressions, st.sampled_from(["y1", "y2"]))
def test_derivative_round_trips(source, wrt):
    d = expr.differentiate(expr.parse(source, dim=2), wrt)
    assert expr.parse(expr.serialize(d), dim=2) == d
