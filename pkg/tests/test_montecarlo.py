"""
Tests for the weak-error ladder, the order fit and the report files
"""

import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from app.models import WeakErrorRow
from app.services.coefficients_service import builtin_model
from app.services.config_service import load_config
from app.services.experiment_service import ExperimentService
from app.services.generator_service import test_function as make_test_function
from app.services.montecarlo_service import (
    WEAK_ERROR_COLUMNS, ExperimentInvalidError, PathFailureError, ProblemRecipe, _finite_paths, _weak_error_row,
    assert_self_convergence, estimate_moment_bound, estimate_one_step_error, estimate_weak_error,
    fit_convergence_order, is_degenerate, run_ladder, save_report, self_convergence_check, summarize_ladder,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"
H_LIST = [0.25, 0.125, 0.0625, 0.03125]


def _rows(errors, stderr=1e-4, n_steps=None):
    return [
        WeakErrorRow(h=h, n_paths=1000, est_scheme=0.5, est_oracle=0.5 + e, weak_error=e, stderr_scheme=0.01,
                     stderr_coupled=stderr, seed=1, n_steps=n_steps or int(round(1 / h)), usable=e > 3 * stderr)
        for h, e in zip(H_LIST, errors)
    ]


def test_fit_recovers_first_order():
    order, intercept, r2 = fit_convergence_order(_rows([0.7 * h for h in H_LIST]))
    assert order == pytest.approx(1.0, abs=1e-12)
    assert intercept == pytest.approx(math.log(0.7), abs=1e-12)
    assert r2 == pytest.approx(1.0)


def test_fit_recovers_second_order():
    order, _, _ = fit_convergence_order(_rows([0.7 * h ** 2 for h in H_LIST], stderr=1e-6))
    assert order == pytest.approx(2.0, abs=1e-12)


def test_fit_needs_three_usable_rows():
    rows = _rows([0.1, 0.05, 1e-5, 1e-5])
    assert [row.usable for row in rows] == [True, True, False, False]
    with pytest.raises(ValueError, match="at least 3"):
        fit_convergence_order(rows)


def test_summary_verdicts(linear_model, headline_levy):
    f = make_test_function("gaussian_bump")
    first = summarize_ladder(linear_model, headline_levy, f, "reference", _rows([0.7 * h for h in H_LIST]))
    assert first.verdict == "pass" and first.passed
    assert len(first.ci_half_width) == 4

    second = summarize_ladder(linear_model, headline_levy, f, "reference",
                              _rows([0.7 * h ** 2 for h in H_LIST], stderr=1e-6))
    assert second.verdict == "fail" and not second.passed

    starved = summarize_ladder(linear_model, headline_levy, f, "reference", _rows([0.1, 0.05, 1e-5, 1e-5]))
    assert starved.verdict == "fail"
    assert "at least 3" in starved.message

    invalid = summarize_ladder(linear_model, headline_levy, f, "reference", _rows([0.7 * h for h in H_LIST]),
                               self_convergence=0.01)
    assert invalid.self_convergence_ok is False
    assert not invalid.passed


def test_degenerate_ladder():
    rows = _rows([0.0, 0.0, 0.0, 0.0], stderr=0.0)
    assert is_degenerate(rows)
    assert not is_degenerate(_rows([0.7 * h for h in H_LIST]))
    assert not is_degenerate([])


def test_self_convergence_threshold():
    rows = _rows([0.7 * h for h in H_LIST])
    assert assert_self_convergence(0.001, rows)
    with pytest.raises(ExperimentInvalidError):
        assert_self_convergence(0.01, rows)
    assert assert_self_convergence(1.0, _rows([0.0] * 4))


def test_failed_paths():
    scheme = np.ones(1000)
    oracle = np.ones(1000)
    scheme[0] = np.nan
    with pytest.raises(PathFailureError):
        _weak_error_row(0.1, scheme, oracle, 1, 10)
    row = _weak_error_row(0.1, np.concatenate([scheme, np.ones(9000)]), np.ones(10_000), 1, 10)
    assert row.failures == 1 and row.n_paths == 9999


def test_paths_failing_at_one_h_leave_every_row(monkeypatch, linear_model, headline_levy):
    scheme = np.full((2, 30_000), 0.5)
    scheme[0, 3] = np.nan
    scheme[1, 7] = np.inf
    oracle = np.full(30_000, 0.5)
    assert _finite_paths(scheme, oracle).sum() == 29_998
    monkeypatch.setattr("app.services.montecarlo_service.execute_batches",
                        lambda problem, jobs, **kwargs: (scheme, oracle))
    rows = run_ladder(linear_model, headline_levy, make_test_function("gaussian_bump"), 0.5, 1.0,
                      [0.25, 0.125], 30_000, 1, oracle="exact_linear")
    assert [(row.n_paths, row.failures) for row in rows] == [(29_998, 2), (29_998, 2)]


def test_save_report_files(tmp_path, linear_model, headline_levy):
    f = make_test_function("gaussian_bump")
    report = summarize_ladder(linear_model, headline_levy, f, "reference", _rows([0.7 * h for h in H_LIST]))
    paths = save_report(report, str(tmp_path / "report"))
    table = pd.read_csv(paths["weak_error"])
    assert list(table.columns) == WEAK_ERROR_COLUMNS
    assert table["h"].tolist() == H_LIST
    plot = pd.read_csv(paths["plot_data"], sep=" ")
    assert list(plot.columns) == ["log2_h", "log2_weak_error"]
    assert plot["log2_h"].tolist() == [-2.0, -3.0, -4.0, -5.0]
    assert np.allclose(plot["log2_weak_error"], np.log2(0.7) + plot["log2_h"])


def test_linear_ladder_is_degenerate(linear_model, headline_levy):
    rows = run_ladder(linear_model, headline_levy, make_test_function("identity"), 1.0, 1.0,
                      [0.0625, 0.25, 0.125], 1000, 11, oracle="exact_linear", batch_size=500)
    assert [row.h for row in rows] == [0.25, 0.125, 0.0625]
    assert [row.n_steps for row in rows] == [4, 8, 16]
    assert is_degenerate(rows)
    report = summarize_ladder(linear_model, headline_levy, make_test_function("identity"), "exact_linear", rows)
    assert report.verdict == "degenerate: scheme exact"
    assert report.passed


def test_brownian_ladder_against_exact_gbm(no_jumps):
    """Without jumps the linear step is the exact GBM flow, so every row is at the ODE tolerance."""
    gbm = builtin_model("linear", [0.1, 0.3, 0.0])
    rows = run_ladder(gbm, no_jumps, make_test_function("gaussian_bump", [1.0, 0.5]), 1.0, 1.0, H_LIST, 1000, 3,
                      oracle="exact_linear", batch_size=500)
    assert is_degenerate(rows)
    assert max(row.weak_error for row in rows) < 1e-6


def test_ladder_input_validation(trig_model, linear_model, headline_levy):
    bump = make_test_function("gaussian_bump")
    with pytest.raises(ValueError, match="at least"):
        run_ladder(linear_model, headline_levy, bump, 1.0, 1.0, H_LIST, 999, 1, oracle="exact_linear")
    with pytest.raises(ValueError, match="unbounded"):
        run_ladder(linear_model, headline_levy, make_test_function("identity"), 1.0, 1.0, H_LIST, 1000, 1)
    with pytest.raises(ValueError, match="linear model"):
        run_ladder(trig_model, headline_levy, bump, 1.0, 1.0, H_LIST, 1000, 1, oracle="exact_linear")
    with pytest.raises(ValueError, match="Unknown oracle"):
        run_ladder(trig_model, headline_levy, bump, 1.0, 1.0, H_LIST, 1000, 1, oracle="euler")


def test_ladder_is_reproducible(linear_model, headline_levy):
    bump = make_test_function("gaussian_bump")
    kwargs = dict(oracle="exact_linear", batch_size=500)
    first = run_ladder(linear_model, headline_levy, bump, 0.5, 1.0, [0.25, 0.125], 1000, 5, **kwargs)
    again = run_ladder(linear_model, headline_levy, bump, 0.5, 1.0, [0.25, 0.125], 1000, 5, **kwargs)
    assert [row.model_dump() for row in first] == [row.model_dump() for row in again]

    shifted = run_ladder(linear_model, headline_levy, bump, 0.5, 1.0, [0.25, 0.125], 1000, 5,
                         path_offset=1000, **kwargs)
    assert shifted[0].est_oracle != first[0].est_oracle


def test_parallel_batches_match_serial(linear_model, headline_levy):
    bump = make_test_function("gaussian_bump")
    serial = run_ladder(linear_model, headline_levy, bump, 0.5, 1.0, [0.25, 0.125], 1000, 5,
                        oracle="exact_linear", batch_size=250)
    parallel = run_ladder(linear_model, headline_levy, bump, 0.5, 1.0, [0.25, 0.125], 1000, 5,
                          oracle="exact_linear", batch_size=250, workers=2, reproducible=True)
    assert [row.model_dump() for row in serial] == [row.model_dump() for row in parallel]


def test_problem_recipe_rebuilds_builtin_problems(trig_model, headline_levy):
    recipe = ProblemRecipe.from_problem(trig_model, headline_levy, make_test_function("cosine", [2.0, 0.1]))
    model, levy, f = recipe.build()
    assert model.name == "bounded_trig" and list(model.params) == [0.3, 0.4, 0.5]
    assert levy.family == "compound_poisson_normal"
    assert f.params == (2.0, 0.1)


def test_coupling_reduces_the_standard_error(linear_model, headline_levy):
    bump = make_test_function("gaussian_bump")
    coupled = estimate_weak_error(linear_model, headline_levy, bump, 0.5, 1.0, 0.25, 1000, 3,
                                  oracle="exact_linear")
    independent = estimate_weak_error(linear_model, headline_levy, bump, 0.5, 1.0, 0.25, 1000, 3,
                                      oracle="exact_linear", coupled=False)
    assert coupled.stderr_coupled < 0.01 * independent.stderr_coupled
    assert coupled.est_oracle == independent.est_oracle


def test_reference_self_convergence_is_small(trig_model, headline_levy):
    value = self_convergence_check(trig_model, headline_levy, make_test_function("gaussian_bump"), 0.5, 1.0,
                                   2.0 ** -6, 1000, 4, batch_size=500)
    assert 0.0 <= value < 0.02


def test_one_step_error_rows(trig_model, headline_levy):
    rows = estimate_one_step_error(trig_model, headline_levy, make_test_function("gaussian_bump"), [0.0, 1.0],
                                   [0.25], 1000, 6, fine_ratio=8)
    assert [(row.x, row.h) for row in rows] == [(0.0, 0.25), (1.0, 0.25)]
    for row in rows:
        assert row.constant == pytest.approx(row.error / (0.25 ** 2 * (1 + row.x ** 4)))
        assert math.isfinite(row.est_reference)


def test_moment_bound_rows(trig_model, headline_levy):
    rows = estimate_moment_bound(trig_model, headline_levy, 0.5, 1.0, [0.25, 0.125], 1000, 8, batch_size=500)
    assert [row.h for row in rows] == [0.25, 0.125]
    for row in rows:
        assert row.max_mean_fourth >= 0.5 ** 4
        assert row.mean_max_fourth >= row.max_mean_fourth - 1e-12
        assert row.constant == pytest.approx(row.mean_max_fourth / (1 + 0.5 ** 4))


def test_experiment_service_convergence_files(small_trig_config):
    report = ExperimentService().run_convergence(small_trig_config)
    assert [row.h for row in report.rows] == [0.25, 0.125, 0.0625]
    assert report.self_convergence is not None
    out = small_trig_config.run.output_dir
    assert list(pd.read_csv(f"{out}/weak_error.csv").columns) == WEAK_ERROR_COLUMNS


@pytest.mark.slow
def test_headline_experiment_is_first_order():
    config = load_config(str(CONFIG_DIR / "headline.ini"))
    report = ExperimentService(workers=4).run_convergence(config, write_files=False)
    assert report.self_convergence_ok
    assert 0.8 <= report.fitted_order <= 1.2
    assert report.verdict == "pass"


@pytest.mark.slow
def test_brownian_weak_error_is_first_order(no_jumps):
    model = builtin_model("bounded_trig", [0.8, 0.8, 0.5])
    rows = run_ladder(model, no_jumps, make_test_function("gaussian_bump"), 0.5, 1.0, [0.5, 0.25, 0.125, 0.0625],
                      100_000, 19, h_fine=2.0 ** -12, batch_size=5000, workers=4)
    order, _, r2 = fit_convergence_order(rows)
    assert 0.8 <= order <= 1.2
    assert r2 > 0.9


@pytest.mark.slow
def test_fourth_moment_is_stable_as_h_halves(trig_model, headline_levy):
    rows = estimate_moment_bound(trig_model, headline_levy, 0.5, 1.0, [0.1, 0.05, 0.025], 20_000, 12)
    values = [row.mean_max_fourth for row in rows]
    for coarse, fine in zip(values, values[1:]):
        assert 1 / 1.5 <= fine / coarse <= 1.5


def test_diagonal_linear_ladder_is_degenerate(headline_levy):
    model = builtin_model("linear", [0.05, 0.2, 0.3], dim=2)
    rows = run_ladder(model, headline_levy, make_test_function("gaussian_bump"), 0.5, 1.0, [0.25, 0.125],
                      1000, 11, oracle="exact_linear", batch_size=500)
    assert [row.n_paths for row in rows] == [1000, 1000]
    assert is_degenerate(rows)


def test_diagonal_moment_bound_counts_every_coordinate(headline_levy):
    model = builtin_model("bounded_trig", [0.3, 0.4, 0.5], dim=2)
    rows = estimate_moment_bound(model, headline_levy, 0.5, 1.0, [0.25], 1000, 8, batch_size=500)
    assert rows[0].max_mean_fourth >= 0.5 ** 4
    assert rows[0].mean_max_fourth >= rows[0].max_mean_fourth - 1e-12


def test_diagonal_path_export_has_coordinates(linear_config):
    config = linear_config.model_copy(update={"model": linear_config.model.model_copy(update={"dim": 2})})
    frames = ExperimentService().export_paths(config, 3, dense=2, write_files=False)
    paths = frames["paths"]
    assert list(paths.columns) == ["path_index", "coord", "k", "t", "scheme", "oracle"]
    assert len(paths) == 3 * 2 * 17
    assert np.allclose(paths["scheme"], paths["oracle"], rtol=1e-6)
    assert sorted(paths["coord"].unique()) == [0, 1]
    assert len(frames["paths_dense"]) == 3 * 2 * 33
