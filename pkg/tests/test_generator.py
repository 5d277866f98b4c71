"""
Tests for the test functions, the generators L~ and Q and their identity check
"""

import math

import numpy as np
import pytest

from app.services.coefficients_service import builtin_model
from app.services.generator_service import (
    apply_L_tilde, apply_Q, combine, generator_growth, test_function as make_test_function, verify_L_equals_Q,
)
from app.services.integrator_service import EffectiveDrift, NoiseBatch, simulate_reference_batch
from app.services.levy_service import levy_model

BOUNDED_FUNCTIONS = ["gaussian_bump", "cosine", "poly_truncated"]
MODELS = [("bounded_trig", [0.3, 0.4, 0.5]), ("linear", [0.05, 0.2, 0.3]), ("constant", [1.0, 2.0, 3.0])]
STATES = np.linspace(-3.0, 3.0, 100)


@pytest.mark.parametrize("tag", BOUNDED_FUNCTIONS)
def test_analytic_derivatives_of_test_functions(tag):
    f = make_test_function(tag)
    x = np.linspace(-3, 3, 25)
    step = 1e-5
    for order in range(1, 5):
        numeric = (f.derivative(x + step, order - 1) - f.derivative(x - step, order - 1)) / (2 * step)
        assert np.allclose(f.derivative(x, order), numeric, atol=1e-6)
    assert f.bounded


def test_test_function_parameters():
    bump = make_test_function("gaussian_bump", [1.0, 0.5])
    assert float(bump(1.0)) == pytest.approx(1.0)
    assert float(bump(1.5)) == pytest.approx(math.exp(-0.5))
    assert float(make_test_function("poly_truncated", [2.0])(0.01)) == pytest.approx(0.01, rel=1e-4)
    assert not make_test_function("identity").bounded
    with pytest.raises(ValueError):
        make_test_function("sigmoid")
    with pytest.raises(ValueError):
        make_test_function("gaussian_bump", [0.0, -1.0])


def test_combined_test_function():
    f, g = make_test_function("cosine"), make_test_function("gaussian_bump")
    h = combine(2.0, f, -1.0, g)
    x = np.array([0.2, 1.1])
    assert np.allclose(h(x), 2.0 * f(x) - g(x))
    assert np.allclose(h.derivative(x, 3), 2.0 * f.derivative(x, 3) - g.derivative(x, 3))


def test_generator_is_linear(trig_model, headline_levy):
    ed = EffectiveDrift.build(trig_model, headline_levy)
    f, g = make_test_function("cosine", [2.0, 0.1]), make_test_function("gaussian_bump")
    combined = apply_L_tilde(trig_model, ed, combine(1.5, f, -0.5, g), STATES)
    separate = 1.5 * apply_L_tilde(trig_model, ed, f, STATES) - 0.5 * apply_L_tilde(trig_model, ed, g, STATES)
    assert np.allclose(combined, separate, atol=1e-12)


def test_generator_matches_short_time_mean(trig_model, atoms_levy):
    """(E f(X_h) - f(x)) / h approaches L~f(x) when every jump is small."""
    ed = EffectiveDrift.build(trig_model, atoms_levy)
    f = make_test_function("gaussian_bump")
    x, h = 0.7, 2.0 ** -6
    noise = NoiseBatch.generate(atoms_levy, 41, range(20_000), h, h / 4)
    moves = (f(simulate_reference_batch(trig_model, noise, x, h / 4)) - float(f(x))) / h
    se = moves.std(ddof=1) / math.sqrt(moves.size)
    assert abs(moves.mean() - float(apply_L_tilde(trig_model, ed, f, x))) < 4 * se + 0.05


@pytest.mark.parametrize("name,params", MODELS)
@pytest.mark.parametrize("tag", BOUNDED_FUNCTIONS)
def test_generator_identity_for_builtin_models(name, params, tag, headline_levy):
    model = builtin_model(name, params)
    ed = EffectiveDrift.build(model, headline_levy)
    report = verify_L_equals_Q(model, ed, make_test_function(tag), STATES, tol=1e-5)
    assert report.passed, report.max_discrepancy
    assert report.n_states == 100


@pytest.mark.parametrize("family,params", [("compound_poisson_fixed", [1.0, 0.5, 1.0]),
                                           ("one_sided_stable", [1.5, 1.0, 1.0]),
                                           ("variance_gamma", [0.5, 0.2, 0.5])])
def test_generator_identity_across_levy_families(trig_model, family, params):
    ed = EffectiveDrift.build(trig_model, levy_model(family, params))
    report = verify_L_equals_Q(trig_model, ed, make_test_function("gaussian_bump"), STATES, tol=1e-5)
    assert report.passed, report.max_discrepancy


def test_generators_annihilate_constants(trig_model, headline_levy):
    ed = EffectiveDrift.build(trig_model, headline_levy)
    one = make_test_function("cosine", [0.0, 0.0])
    x = np.array([-1.0, 0.4, 2.0])
    assert np.all(apply_L_tilde(trig_model, ed, one, x) == 0.0)
    assert np.all(apply_Q(trig_model, ed, one, x, 0.0, 0.0, 0.0) == 0.0)


def test_L_tilde_of_identity_is_effective_drift(trig_model, no_jumps):
    ed = EffectiveDrift.build(trig_model, no_jumps)
    x = np.linspace(-2, 2, 7)
    expected = trig_model.a(x) + 0.5 * trig_model.deriv_b(x, 1) * trig_model.b(x)
    assert np.allclose(apply_L_tilde(trig_model, ed, make_test_function("identity"), x), expected)


def test_Q_vanishes_for_zero_coefficients(headline_levy):
    zero = builtin_model("linear", [0.0, 0.0, 0.0])
    ed = EffectiveDrift.build(zero, headline_levy)
    values = apply_Q(zero, ed, make_test_function("gaussian_bump"), np.array([0.0, 1.0]), 0.3, 0.2, -0.1)
    assert np.all(values == 0.0)


def test_Q_at_origin_without_jumps(trig_model, no_jumps):
    """psi_tau = a, psi_w = b and psi_ww = b b' at the origin."""
    ed = EffectiveDrift.build(trig_model, no_jumps)
    f = make_test_function("cosine")
    x = np.linspace(-2, 2, 9)
    a, b, db = trig_model.a(x), trig_model.b(x), trig_model.deriv_b(x, 1)
    expected = a * f.derivative(x, 1) + 0.5 * b ** 2 * f.derivative(x, 2) + 0.5 * b * db * f.derivative(x, 1)
    assert np.allclose(apply_Q(trig_model, ed, f, x, 0.0, 0.0, 0.0), expected, atol=1e-6)


def test_Q_at_origin_with_atoms(trig_model, atoms_levy):
    ed = EffectiveDrift.build(trig_model, atoms_levy)
    f = make_test_function("cosine")
    assert float(apply_Q(trig_model, ed, f, 0.3, 0.0, 0.0, 0.0)) == pytest.approx(
        float(apply_L_tilde(trig_model, ed, f, 0.3)), abs=1e-6)


def test_constant_model_closed_form(constant_model, atoms_levy):
    ed = EffectiveDrift.build(constant_model, atoms_levy)
    f = make_test_function("gaussian_bump")
    x = np.linspace(-1, 1, 11)
    jumps = sum(f(x + 3.0 * z) - f(x) - f.derivative(x, 1) * 3.0 * z for z in (0.5, -0.5))
    expected = 1.0 * f.derivative(x, 1) + 0.5 * 4.0 * f.derivative(x, 2) + jumps
    assert np.allclose(apply_L_tilde(constant_model, ed, f, x), expected, atol=1e-12)
    report = verify_L_equals_Q(constant_model, ed, f, x, tol=1e-7, fd_step=1e-3)
    assert report.passed, report.max_discrepancy


def test_identity_check_reports_failure(trig_model, headline_levy):
    ed = EffectiveDrift.build(trig_model, headline_levy)
    report = verify_L_equals_Q(trig_model, ed, make_test_function("cosine"), [0.0, 1.0], tol=1e-30)
    assert not report.passed
    with pytest.raises(ValueError):
        verify_L_equals_Q(trig_model, ed, make_test_function("cosine"), [np.nan])


def test_generator_growth_is_bounded(trig_model, headline_levy):
    ed = EffectiveDrift.build(trig_model, headline_levy)
    growth = generator_growth(trig_model, ed, make_test_function("gaussian_bump"), np.linspace(-20, 20, 41))
    assert math.isfinite(growth["sup_ratio"]) and growth["sup_ratio"] > 0
    assert growth["constant"] <= growth["sup_ratio"]
