"""
Tests for the Wong-Zakai scheme, the jump-adapted reference, the exact linear
oracle and the effective drift
"""

import math

import numpy as np
import pytest

from app.services.coefficients_service import builtin_model
from app.services.flow_service import solve_flow
from app.services.integrator_service import (
    EffectiveDrift, NoiseBatch, effective_drift_eval, exact_linear_batch, exact_linear_path, path_frame,
    simulate_reference_batch, simulate_reference_path, simulate_wz_batch, simulate_wz_path, wz_dense_output,
    wz_step,
)
from app.services.levy_service import IncrementStream, levy_exponent, levy_model


def test_wz_step_special_cases(constant_model, linear_model):
    zero_drift = builtin_model("bounded_trig", [0.0, 0.4, 0.5])
    assert float(wz_step(zero_drift, 0.3, 0.1, 0.0, 0.0)) == pytest.approx(0.3, abs=1e-14)
    assert float(wz_step(linear_model, 2.0, 0.1, 0.3, -0.4)) == pytest.approx(
        2.0 * math.exp(0.05 * 0.1 + 0.2 * 0.3 - 0.3 * 0.4), rel=1e-9)
    assert float(wz_step(constant_model, 2.0, 0.1, 0.3, -0.4)) == pytest.approx(
        2.0 + 0.1 + 2.0 * 0.3 - 3.0 * 0.4, abs=1e-12)
    with pytest.raises(ValueError):
        wz_step(linear_model, 1.0, 0.0, 0.0, 0.0)


def test_zero_noise_zero_drift_path_is_constant(no_jumps):
    model = builtin_model("bounded_trig", [0.0, 0.0, 0.5])
    path = simulate_wz_path(model, no_jumps, 0.8, 1.0, 0.125, IncrementStream(1, 0))
    assert np.allclose(path.states, 0.8, atol=1e-14)
    assert path.times[-1] == pytest.approx(1.0)
    assert path.scheme_tag == "wong_zakai"


def test_linear_scheme_reproduces_exact_solution(linear_model, headline_levy):
    stream = IncrementStream(42, 3)
    h = 0.0625
    scheme = simulate_wz_path(linear_model, headline_levy, 1.0, 1.0, h, stream)
    exact = exact_linear_path(0.05, 0.2, 0.3, headline_levy, 1.0, 1.0, IncrementStream(42, 3), h=h)
    steps = np.arange(scheme.states.size)
    assert np.all(np.abs(scheme.states - exact.states) <= 1e-8 * np.maximum(steps, 1) * np.maximum(1.0, exact.states))
    assert scheme.stream_ref == (42, 3)


def test_path_regeneration_is_deterministic(trig_model, headline_levy):
    first = simulate_wz_path(trig_model, headline_levy, 0.5, 1.0, 0.125, IncrementStream(9, 4))
    second = simulate_wz_path(trig_model, headline_levy, 0.5, 1.0, 0.125, IncrementStream(9, 4))
    assert np.array_equal(first.states, second.states)
    assert np.array_equal(first.dz, second.dz)


def test_coarse_increments_aggregate_the_base_grid(headline_levy):
    noise = NoiseBatch.generate(headline_levy, 5, range(4), 1.0, 0.03125)
    dw_fine, dz_fine = noise.increments(0.03125)
    dw, dz = noise.increments(0.25)
    assert np.allclose(dw, dw_fine.reshape(4, 4, 8).sum(axis=2))
    assert np.allclose(dz, dz_fine.reshape(4, 4, 8).sum(axis=2))
    w, z = noise.cumulative(0.25)
    assert np.allclose(w[:, -1], dw_fine.sum(axis=1))
    assert np.allclose(z[:, -1], dz_fine.sum(axis=1))
    with pytest.raises(ValueError):
        noise.increments(0.1)


def test_selected_rows_keep_their_jumps(headline_levy):
    noise = NoiseBatch.generate(headline_levy, 5, range(6), 1.0, 0.125)
    subset = noise.select(np.array([1, 4]))
    _, dz_all = noise.increments(0.125)
    _, dz_sub = subset.increments(0.125)
    assert np.array_equal(subset.path_indices, np.array([1, 4]))
    assert np.allclose(dz_sub, dz_all[[1, 4]])


def test_reference_pure_jump_applies_the_flow():
    model = builtin_model("bounded_trig", [0.0, 0.0, 0.5])
    levy = levy_model("compound_poisson_fixed", [1.0, 2.5])
    noise = NoiseBatch.generate(levy, 3, range(50), 1.0, 0.25)
    final = simulate_reference_batch(model, noise, 0.4, 0.25)
    counts = np.bincount(noise.jump_path, minlength=50)
    expected = np.full(50, 0.4)
    for k in range(int(counts.max()) + 1):
        expected = np.where(counts > k, solve_flow(model, expected, 2.5).value, expected)
    assert np.allclose(final, expected, atol=1e-7)
    assert counts.max() >= 1


def test_reference_with_constant_jump_coefficient_is_ito(constant_model):
    """Marcus and Ito jump updates coincide for constant c."""
    levy = levy_model("compound_poisson_fixed", [2.0, 1.5])
    noise = NoiseBatch.generate(levy, 8, range(20), 1.0, 0.125)
    final = simulate_reference_batch(constant_model, noise, 0.0, 0.125)
    w, z = noise.cumulative(0.125)
    assert np.allclose(final, 1.0 + 2.0 * w[:, -1] + 3.0 * (z[:, -1] + noise.compensator), atol=1e-9)


def test_reference_tracks_the_linear_solution(linear_model, headline_levy):
    """Strong error of the reference integrator is O(h_fine^{1/2})."""
    noise = NoiseBatch.generate(headline_levy, 13, range(200), 1.0, 2.0 ** -10)
    reference = simulate_reference_batch(linear_model, noise, 1.0, 2.0 ** -10)
    exact = exact_linear_batch(linear_model, noise, 1.0)
    assert np.sqrt(np.mean((reference - exact) ** 2)) < 0.05


def test_reference_path_and_small_jump_variant(trig_model, headline_levy):
    path = simulate_reference_path(trig_model, headline_levy, 0.5, 1.0, 0.0625, IncrementStream(2, 0))
    small = simulate_reference_path(trig_model, headline_levy, 0.5, 1.0, 0.0625, IncrementStream(2, 0),
                                    small_jump_only=True)
    assert path.scheme_tag == "ito_reference"
    assert small.scheme_tag == "small_jump_only"
    assert path.states.size == 17 and np.all(np.isfinite(path.states))


def test_geometric_brownian_motion_mean(no_jumps):
    """M = 0: E X_T = x0 exp((alpha + beta^2/2) T) for the Stratonovich equation."""
    model = builtin_model("linear", [0.1, 0.3, 0.0])
    noise = NoiseBatch.generate(no_jumps, 4, range(20_000), 1.0, 0.25)
    final = simulate_wz_batch(model, noise, 1.0, 0.25)
    se = final.std(ddof=1) / math.sqrt(final.size)
    assert abs(final.mean() - math.exp(0.1 + 0.045)) < 4 * se


def test_linear_model_mean_uses_the_levy_exponent(linear_model, headline_levy):
    """E X_T = x0 exp(alpha T + beta^2 T/2 + T kappa(M)) for the linear Marcus equation."""
    noise = NoiseBatch.generate(headline_levy, 17, range(20_000), 1.0, 0.25)
    final = simulate_wz_batch(linear_model, noise, 2.0, 0.25)
    expected = 2.0 * math.exp(0.05 + 0.5 * 0.2 ** 2 + levy_exponent(headline_levy, 0.3))
    se = final.std(ddof=1) / math.sqrt(final.size)
    assert abs(final.mean() - expected) < 4 * se


def test_exact_oracle_needs_linear_model(trig_model, headline_levy):
    noise = NoiseBatch.generate(headline_levy, 1, range(2), 1.0, 0.5)
    with pytest.raises(ValueError, match="linear model"):
        exact_linear_batch(trig_model, noise, 1.0)


def test_dense_output_hits_the_knots(trig_model, headline_levy):
    noise = NoiseBatch.generate(headline_levy, 6, range(3), 1.0, 0.0625)
    knots = simulate_wz_batch(trig_model, noise, 0.5, 0.25, record=True)
    times, dense = wz_dense_output(trig_model, noise, knots, 0.25, 4)
    assert times.size == 17
    assert np.array_equal(dense[:, ::4], knots)
    assert np.all(np.isfinite(dense))


def test_dense_output_is_exact_for_linear_model(linear_model, headline_levy):
    noise = NoiseBatch.generate(headline_levy, 6, range(3), 1.0, 0.0625)
    knots = simulate_wz_batch(linear_model, noise, 1.0, 0.25, record=True)
    _, dense = wz_dense_output(linear_model, noise, knots, 0.25, 4)
    exact = exact_linear_batch(linear_model, noise, 1.0, 0.0625, record=True)
    assert np.allclose(dense, exact, rtol=1e-7)


def test_effective_drift_with_constant_jump_coefficient(headline_levy):
    model = builtin_model("constant", [0.5, 2.0, 3.0])
    ed = EffectiveDrift.build(model, headline_levy)
    assert effective_drift_eval(ed, 1.3) == pytest.approx(0.5)


def test_effective_drift_without_jumps_is_stratonovich_drift(trig_model, no_jumps):
    ed = EffectiveDrift.build(trig_model, no_jumps)
    x = np.linspace(-2, 2, 9)
    assert np.allclose(effective_drift_eval(ed, x), trig_model.a(x) + 0.5 * trig_model.deriv_b(x, 1) * trig_model.b(x))


def test_effective_drift_with_two_atoms(atoms_levy):
    model = builtin_model("bounded_trig", [0.0, 0.0, 1.0])
    ed = EffectiveDrift.build(model, atoms_levy)
    x = 0.9
    expected = sum(float(solve_flow(model, x, z).value) - x - math.sin(x) * z for z in (0.5, -0.5))
    assert effective_drift_eval(ed, x) == pytest.approx(expected, abs=1e-9)


def test_full_drift_adds_big_jump_atoms():
    model = builtin_model("linear", [0.0, 0.0, 0.5])
    levy = levy_model("compound_poisson_fixed", [1.0, 2.0])
    ed = EffectiveDrift.build(model, levy)
    assert float(ed.full_drift(1.0)) == pytest.approx(math.exp(1.0) - 1.0, rel=1e-9)
    assert float(ed.between_jumps_drift(1.0)) == pytest.approx(0.0)


def test_full_drift_matches_short_time_mean(trig_model, headline_levy):
    """E[X_h - x] / h of the reference integrator approaches the full drift."""
    ed = EffectiveDrift.build(trig_model, headline_levy)
    h = 2.0 ** -6
    noise = NoiseBatch.generate(headline_levy, 31, range(20_000), h, h / 4)
    moves = (simulate_reference_batch(trig_model, noise, 0.7, h / 4) - 0.7) / h
    se = moves.std(ddof=1) / math.sqrt(moves.size)
    assert abs(moves.mean() - float(ed.full_drift(0.7))) < 4 * se + 0.05


def test_path_frame_layout():
    frame = path_frame(np.array([3, 4]), np.array([0.0, 0.5, 1.0]), np.ones((2, 3)), np.zeros((2, 3)))
    assert list(frame.columns) == ["path_index", "k", "t", "scheme", "oracle"]
    assert frame["path_index"].tolist() == [3, 3, 3, 4, 4, 4]
    assert frame["k"].tolist() == [0, 1, 2, 0, 1, 2]


def test_diagonal_coordinates_follow_their_own_streams(headline_levy):
    """Coordinate i of path p is the scalar solution driven by stream p * dim + i."""
    model = builtin_model("bounded_trig", [0.3, 0.4, 0.5], dim=2)
    noise = NoiseBatch.generate(headline_levy, 5, range(4), 1.0, 0.125, dim=2)
    final = simulate_wz_batch(model, noise, [0.5, -1.0], 0.125)
    assert final.shape == (4, 2)
    assert noise.n_paths == 4 and noise.n_rows == 8
    scalar = builtin_model("bounded_trig", [0.3, 0.4, 0.5])
    for coord, x0 in enumerate((0.5, -1.0)):
        streams = NoiseBatch.generate(headline_levy, 5, [2 * p + coord for p in range(4)], 1.0, 0.125)
        assert np.allclose(final[:, coord], simulate_wz_batch(scalar, streams, x0, 0.125), rtol=1e-6, atol=1e-7)


def test_diagonal_recording_and_reference_shapes(headline_levy):
    model = builtin_model("bounded_trig", [0.3, 0.4, 0.5], dim=3)
    noise = NoiseBatch.generate(headline_levy, 2, range(5), 1.0, 0.0625, dim=3)
    states = simulate_wz_batch(model, noise, 0.2, 0.25, record=True)
    assert states.shape == (5, 3, 5)
    assert np.all(states[:, :, 0] == 0.2)
    reference = simulate_reference_batch(model, noise, 0.2, 0.0625)
    assert reference.shape == (5, 3) and np.all(np.isfinite(reference))
    times, dense = wz_dense_output(model, noise, states, 0.25, 4)
    assert dense.shape == (5, 3, 17)
    assert np.array_equal(dense[..., ::4], states)


def test_diagonal_coordinates_are_independent(no_jumps):
    model = builtin_model("linear", [0.0, 1.0, 0.0], dim=2)
    noise = NoiseBatch.generate(no_jumps, 11, range(4000), 1.0, 0.5, dim=2)
    log_final = np.log(simulate_wz_batch(model, noise, 1.0, 0.5))
    # log X_T = W_T per coordinate
    assert abs(np.corrcoef(log_final[:, 0], log_final[:, 1])[0, 1]) < 0.06


def test_diagonal_exact_oracle_and_selection(headline_levy):
    model = builtin_model("linear", [0.05, 0.2, 0.3], dim=2)
    noise = NoiseBatch.generate(headline_levy, 7, range(6), 1.0, 0.125, dim=2)
    exact = exact_linear_batch(model, noise, 1.0)
    assert exact.shape == (6, 2)
    assert np.allclose(simulate_wz_batch(model, noise, 1.0, 0.125), exact, rtol=1e-6)
    subset = noise.select(np.array([1, 4]))
    assert np.array_equal(subset.path_indices, np.array([1, 4]))
    assert subset.n_rows == 4
    assert np.allclose(exact_linear_batch(model, subset, 1.0), exact[[1, 4]])


def test_dimension_mismatch_is_rejected(headline_levy, trig_model):
    diagonal = builtin_model("bounded_trig", [0.3, 0.4, 0.5], dim=2)
    scalar_noise = NoiseBatch.generate(headline_levy, 1, range(3), 1.0, 0.25)
    with pytest.raises(ValueError, match="dimension"):
        simulate_wz_batch(diagonal, scalar_noise, 0.0, 0.25)
    pair_noise = NoiseBatch.generate(headline_levy, 1, range(3), 1.0, 0.25, dim=2)
    with pytest.raises(ValueError, match="dimension"):
        simulate_reference_batch(trig_model, pair_noise, 0.0, 0.25)
    with pytest.raises(ValueError):
        simulate_wz_batch(diagonal, pair_noise, [0.0, 1.0, 2.0], 0.25)
    with pytest.raises(ValueError):
        simulate_wz_path(diagonal, headline_levy, 0.0, 1.0, 0.25, IncrementStream(1, 0))
    with pytest.raises(ValueError):
        NoiseBatch.generate(headline_levy, 1, range(3), 1.0, 0.25, dim=0)


def test_path_frame_adds_coordinates():
    scheme = np.arange(12, dtype=float).reshape(2, 2, 3)
    frame = path_frame(np.array([5, 6]), np.array([0.0, 0.5, 1.0]), scheme, scheme + 1.0)
    assert list(frame.columns) == ["path_index", "coord", "k", "t", "scheme", "oracle"]
    assert frame["path_index"].tolist() == [5] * 6 + [6] * 6
    assert frame["coord"].tolist() == [0, 0, 0, 1, 1, 1] * 2
    assert frame["scheme"].tolist() == list(range(12))
