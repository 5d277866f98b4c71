"""
Tests for the coefficient models and the sup-norm hypothesis check
"""

import math

import numpy as np
import pytest

from app.services.coefficients_service import (
    builtin_model, check_habc, custom_model, default_state_grid, derivative_discrepancy,
)


def test_zero_linear_model_vanishes():
    """linear(0, 0, 0) is the zero model."""
    model = builtin_model("linear", [0.0, 0.0, 0.0])
    x = np.linspace(-5, 5, 11)
    for name in ("a", "b", "c"):
        assert np.all(model.derivative(name, x, 0) == 0.0)
    assert model.c_is_constant


def test_constant_model_has_zero_derivatives(constant_model):
    x = np.linspace(-3, 3, 7)
    assert np.all(constant_model.derivative("a", x, 1) == 0.0)
    assert np.allclose(constant_model.c(x), 3.0)
    assert constant_model.bound("c1") == 0.0


def test_trig_derivative_of_sine():
    model = builtin_model("bounded_trig", [1.0, 1.0, 1.0])
    assert model.derivative("c", 0.0, 1) == pytest.approx(1.0)
    assert model.derivative("b", 0.0, 0) == pytest.approx(1.0)   # cos(0)
    assert model.derivative("c", 0.3, 4) == pytest.approx(math.sin(0.3))


def test_analytic_derivatives_match_finite_differences(trig_model, linear_model):
    points = np.linspace(-4, 4, 41)
    for model in (trig_model, linear_model):
        gaps = derivative_discrepancy(model, points)
        assert max(gaps.values()) < 1e-7


def test_unknown_model_and_bad_params_rejected():
    with pytest.raises(ValueError, match="Unknown model"):
        builtin_model("quadratic", [1.0])
    with pytest.raises(ValueError, match="expects"):
        builtin_model("linear", [1.0, 2.0])
    with pytest.raises(ValueError):
        builtin_model("linear", [1.0, 2.0, 3.0]).derivative("c", 0.0, 5)


def test_unknown_bound_is_infinite():
    model = custom_model("partial", np.sin, np.cos, np.sin,
                         lambda x, k: np.sin(x + k * math.pi / 2),
                         lambda x, k: np.cos(x + k * math.pi / 2),
                         lambda x, k: np.sin(x + k * math.pi / 2),
                         bound_catalog={"c1": 1.0})
    assert model.c_prime_bound == 1.0
    assert math.isinf(model.bound("c2"))
    assert model.lipschitz_bounds() == (1.0, 1.0, 1.0)


def test_habc_passes_for_bounded_trig(trig_model):
    grid = np.arange(-100.0, 100.0 + 1e-9, 0.1)
    report = check_habc(trig_model, grid)
    assert report.passed
    assert len(report.clauses) == 18
    sups = {clause.clause: clause.empirical_sup for clause in report.clauses}
    assert sups["||c^(1)||"] == pytest.approx(0.5, rel=1e-3)


def test_habc_passes_for_linear_model():
    report = check_habc(builtin_model("linear", [1.0, 1.0, 1.0]))
    assert report.passed
    products = [clause for clause in report.clauses if clause.kind == "product"]
    assert all(clause.empirical_sup == 0.0 for clause in products)


def test_habc_flags_quadratic_drift():
    """a(x) = x^2 has a' = 2x, unbounded on expanding grids."""
    zeros = lambda x: np.zeros_like(np.asarray(x, dtype=float))

    def deriv_a(x, order):
        x = np.asarray(x, dtype=float)
        return 2 * x if order == 1 else (np.full_like(x, 2.0) if order == 2 else zeros(x))

    model = custom_model("quadratic_drift", lambda x: np.asarray(x, dtype=float) ** 2, zeros, zeros,
                         deriv_a, lambda x, k: zeros(x), lambda x, k: zeros(x))
    report = check_habc(model)
    verdicts = {clause.clause: clause.verdict for clause in report.clauses}
    assert verdicts["||a^(1)||"] == "numerically-unbounded"
    assert verdicts["||a^(2)||"] == "pass"
    assert not report.passed


def test_habc_degenerate_grid_is_unknown(trig_model):
    report = check_habc(trig_model, np.array([0.5, 0.5]))
    assert {clause.verdict for clause in report.clauses} == {"unknown"}
    assert not report.passed


def test_default_state_grid_is_deterministic():
    first, second = default_state_grid(), default_state_grid()
    assert np.array_equal(first, second)
    assert first.min() == -50.0 and first.max() >= 50.0
