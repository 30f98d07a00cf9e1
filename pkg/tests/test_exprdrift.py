import numpy as np
import pytest

from hypograd.exprdrift import DriftExpr, parse_expr


def test_parse_and_eval_polynomial():
    e = parse_expr("x1 + 0.4*x1^3 - 2*x2", 2)
    x = np.array([[1.0, 2.0], [0.5, -1.0]])
    expect = x[:, 0] + 0.4 * x[:, 0] ** 3 - 2 * x[:, 1]
    assert np.allclose(e(x), expect)


def test_symbolic_derivative_matches_fd():
    e = parse_expr("sin(x1)*exp(x2) + x1^2/(1 + x2^2)", 2)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(50, 2))
    h = 1e-6
    for i in range(2):
        step = np.zeros(2)
        step[i] = h
        fd = (e(x + step) - e(x - step)) / (2 * h)
        assert np.allclose(e.diff(i)(x), fd, atol=1e-7)


def test_second_derivatives():
    field = DriftExpr(["x1^3 * x2"], 2)
    x = np.array([[2.0, 3.0]])
    hess = field.hessian(x)[0, 0]
    # d2/dx1dx1 = 6 x1 x2, d2/dx1dx2 = 3 x1^2, d2/dx2dx2 = 0
    assert np.allclose(hess, [[36.0, 12.0], [12.0, 0.0]])


def test_constant_jacobian_detection():
    assert DriftExpr(["x2", "-x1 - x2"], 2).is_constant_jacobian()
    assert not DriftExpr(["x1*x2"], 2).is_constant_jacobian()


def test_unknown_symbol_rejected():
    with pytest.raises(ValueError):
        parse_expr("x3 + 1", 2)
    with pytest.raises(ValueError):
        parse_expr("foo(x1)", 2)


def test_integer_exponent_required():
    with pytest.raises(ValueError):
        parse_expr("x1^0.5", 1)


def test_division_and_functions():
    e = parse_expr("tanh(x1) / (2 + cos(x1))", 1)
    x = np.array([[0.3]])
    assert np.isclose(e(x)[0], np.tanh(0.3) / (2 + np.cos(0.3)))
