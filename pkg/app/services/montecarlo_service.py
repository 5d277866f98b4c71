"""
Monte Carlo weak-error estimation with common random numbers, order fitting
and the self-convergence certificate of the reference integrator
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from app.config import (
    MC_ODE_TOL, DEFAULT_BATCH_SIZE, DEFAULT_FINE_RATIO, MIN_MC_PATHS, MAX_PATH_FAILURE_RATE,
    NOISE_FLOOR_SIGMAS, SELF_CONVERGENCE_FRACTION, ORDER_ACCEPTANCE, DEGENERATE_ODE_TOL,
    ORACLES, OUTPUT_FILES, TEST_FUNCTION_CATALOG,
)
from app.models import WeakErrorRow, WeakErrorReport, OneStepRow, MomentBoundRow
from app.services.coefficients_service import BUILTIN_MODELS, CoefficientModel, builtin_model
from app.services.generator_service import TestFunction, test_function
from app.services.integrator_service import (
    NoiseBatch, exact_linear_batch, simulate_reference_batch, simulate_wz_batch,
)
from app.services.levy_service import LevyModel, grid_steps, levy_model

logger = logging.getLogger(__name__)

WEAK_ERROR_COLUMNS = ["h", "n_paths", "est_scheme", "est_oracle", "weak_error",
                      "stderr_scheme", "stderr_coupled", "seed"]
CSV_FLOAT_FORMAT = "%.17g"

Problem = Tuple[CoefficientModel, LevyModel, TestFunction]


class PathFailureError(RuntimeError):
    """More than 0.01 % of the paths of a row produced non-finite values."""


class ExperimentInvalidError(RuntimeError):
    """The reference integrator is not accurate enough for the measured weak errors."""


@dataclass(frozen=True)
class ProblemRecipe:
    """Names and parameters from which a worker process rebuilds (model, levy, f)."""
    model_name: str
    model_params: Tuple[float, ...]
    dim: int
    levy_family: str
    levy_params: Tuple[float, ...]
    truncation: float
    f_tag: str
    f_params: Tuple[float, ...]

    @classmethod
    def from_problem(cls, model: CoefficientModel, levy: LevyModel, f: TestFunction) -> Optional["ProblemRecipe"]:
        """None when the problem holds components that only exist in this process."""
        if model.name not in BUILTIN_MODELS or f.tag not in TEST_FUNCTION_CATALOG:
            return None
        try:
            rebuilt = builtin_model(model.name, list(model.params), dim=model.dim_state)
        except ValueError:
            return None
        if rebuilt.bound_catalog != model.bound_catalog:
            return None
        return cls(model.name, tuple(model.params), model.dim_state, levy.family, tuple(levy.params),
                   levy.small_jump_truncation, f.tag, tuple(f.params))

    def build(self) -> Problem:
        return (
            builtin_model(self.model_name, list(self.model_params), dim=self.dim),
            levy_model(self.levy_family, list(self.levy_params), self.truncation),
            test_function(self.f_tag, list(self.f_params)),
        )


@dataclass(frozen=True)
class BatchJob:
    """One batch of consecutive path indices.

    The oracle runs on paths [start, stop); the scheme runs on the same paths
    when coupled, otherwise on scheme_start + [0, stop - start).
    """
    seed: int
    start: int
    stop: int
    T: float
    base_step: float
    x0: float
    h_list: Tuple[float, ...]
    oracle: str
    h_ref: Optional[float]
    tol: float
    scheme: str = "wong_zakai"
    scheme_start: Optional[int] = None


def _evolve(model: CoefficientModel, noise: NoiseBatch, job: BatchJob, kind: str, h: Optional[float]) -> np.ndarray:
    if kind == "wong_zakai":
        return simulate_wz_batch(model, noise, job.x0, h, tol=job.tol)
    if kind == "reference":
        return simulate_reference_batch(model, noise, job.x0, h, tol=job.tol)
    if kind == "exact_linear":
        return exact_linear_batch(model, noise, job.x0)
    raise ValueError(f"Unknown path simulator: {kind}")


def run_batch(problem: Problem, job: BatchJob) -> Tuple[np.ndarray, np.ndarray]:
    """f at the endpoints: scheme values (len(h_list), n) and oracle values (n,).

    For diagonal models f is averaged over the coordinates of each path.
    """
    model, levy, f = problem
    dim = model.dim_state
    noise = NoiseBatch.generate(levy, job.seed, range(job.start, job.stop), job.T, job.base_step, dim=dim)
    scheme_noise = noise
    if job.scheme_start is not None:
        size = job.stop - job.start
        scheme_noise = NoiseBatch.generate(levy, job.seed, range(job.scheme_start, job.scheme_start + size),
                                           job.T, job.base_step, dim=dim)
    oracle_x = _evolve(model, noise, job, job.oracle, job.h_ref)
    scheme_x = np.stack([_evolve(model, scheme_noise, job, job.scheme, h) for h in job.h_list])
    with np.errstate(over="ignore", invalid="ignore"):
        scheme_f, oracle_f = np.asarray(f(scheme_x)), np.asarray(f(oracle_x))
    if dim > 1:
        scheme_f, oracle_f = scheme_f.mean(axis=-1), oracle_f.mean(axis=-1)
    return scheme_f, oracle_f


_WORKER_PROBLEM: Optional[Problem] = None


def _init_worker(recipe: ProblemRecipe) -> None:
    global _WORKER_PROBLEM
    _WORKER_PROBLEM = recipe.build()


def _worker_run(index: int, job: BatchJob) -> Tuple[int, Tuple[np.ndarray, np.ndarray]]:
    return index, run_batch(_WORKER_PROBLEM, job)


def execute_batches(problem: Problem, jobs: Sequence[BatchJob], workers: int = 1,
                    reproducible: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Run the jobs and concatenate per-path values.

    Batches are concatenated in index order when reproducible, otherwise in
    completion order.
    """
    if not jobs:
        raise ValueError("No batches to run")
    recipe = ProblemRecipe.from_problem(*problem) if workers > 1 and len(jobs) > 1 else None
    if workers > 1 and len(jobs) > 1 and recipe is None:
        logger.warning("Problem has components that cannot be rebuilt in workers; running in-process")

    if recipe is None:
        results = []
        for i, job in enumerate(jobs):
            logger.debug(f"Batch {i + 1}/{len(jobs)}: paths {job.start}..{job.stop - 1}")
            results.append(run_batch(problem, job))
    else:
        workers = min(workers, len(jobs), os.cpu_count() or 1)
        logger.info(f"Running {len(jobs)} batches on {workers} worker processes")
        finished: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
        arrival: List[int] = []
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(recipe,)) as executor:
            futures = [executor.submit(_worker_run, i, job) for i, job in enumerate(jobs)]
            for future in as_completed(futures):
                index, values = future.result()
                finished[index] = values
                arrival.append(index)
        order = sorted(finished) if reproducible else arrival
        results = [finished[i] for i in order]

    scheme = np.concatenate([r[0] for r in results], axis=1)
    oracle = np.concatenate([r[1] for r in results])
    return scheme, oracle


def _batch_jobs(n_paths: int, batch_size: int, path_offset: int, coupled: bool, **fields) -> List[BatchJob]:
    jobs = []
    for start in range(path_offset, path_offset + n_paths, batch_size):
        stop = min(start + batch_size, path_offset + n_paths)
        scheme_start = None if coupled else start + n_paths
        jobs.append(BatchJob(start=start, stop=stop, scheme_start=scheme_start, **fields))
    return jobs


def _check_oracle(model: CoefficientModel, f: TestFunction, oracle: str) -> None:
    if oracle not in ORACLES:
        raise ValueError(f"Unknown oracle: {oracle}. Available: {list(ORACLES)}")
    if oracle == "exact_linear" and model.name != "linear":
        raise ValueError(f"The exact_linear oracle needs the linear model, got '{model.name}'")
    if not f.bounded and oracle != "exact_linear":
        raise ValueError(f"Test function '{f.tag}' is unbounded and needs the exact_linear oracle")


def _finite_paths(scheme: np.ndarray, oracle: np.ndarray) -> np.ndarray:
    """Paths whose oracle value and every scheme value are finite; scheme is (rows, n) or (n,)."""
    return np.isfinite(oracle) & np.all(np.isfinite(np.atleast_2d(scheme)), axis=0)


def _weak_error_row(h: float, scheme: np.ndarray, oracle: np.ndarray, seed: int, n_steps: int,
                    finite: Optional[np.ndarray] = None) -> WeakErrorRow:
    """Row from coupled per-path values; finite selects the paths kept (default: those finite here)."""
    if finite is None:
        finite = _finite_paths(scheme, oracle)
    failures = int(scheme.size - finite.sum())
    if failures > MAX_PATH_FAILURE_RATE * scheme.size:
        raise PathFailureError(f"{failures} of {scheme.size} paths failed at h={h}")
    if failures:
        logger.warning(f"Dropping {failures} failed paths at h={h}")
    scheme, oracle = scheme[finite], oracle[finite]
    n = scheme.size
    diff = oracle - scheme
    stderr_coupled = float(np.std(diff, ddof=1) / np.sqrt(n))
    weak_error = float(abs(diff.mean()))
    return WeakErrorRow(
        h=h, n_paths=n, est_scheme=float(scheme.mean()), est_oracle=float(oracle.mean()),
        weak_error=weak_error, stderr_scheme=float(np.std(scheme, ddof=1) / np.sqrt(n)),
        stderr_coupled=stderr_coupled, seed=seed, n_steps=n_steps, failures=failures,
        usable=weak_error > NOISE_FLOOR_SIGMAS * stderr_coupled,
    )


def _base_step(oracle: str, h_list: Sequence[float], h_fine: Optional[float]) -> Tuple[float, Optional[float]]:
    """(base step of the noise grid, reference step)."""
    if oracle == "reference":
        h_ref = h_fine or min(h_list) / DEFAULT_FINE_RATIO
        return h_ref, h_ref
    return min(h_list), None


def run_ladder(model: CoefficientModel, levy: LevyModel, f: TestFunction, x0: float, T: float,
               h_list: Sequence[float], n_paths: int, seed: int, oracle: str = "reference",
               h_fine: Optional[float] = None, coupled: bool = True, tol: float = MC_ODE_TOL,
               batch_size: int = DEFAULT_BATCH_SIZE, workers: int = 1, reproducible: bool = True,
               path_offset: int = 0) -> List[WeakErrorRow]:
    """Weak-error rows for every h; the oracle is computed once per batch and shared by all rows."""
    if n_paths < MIN_MC_PATHS:
        raise ValueError(f"n_paths must be at least {MIN_MC_PATHS}, got {n_paths}")
    _check_oracle(model, f, oracle)
    h_list = sorted((float(h) for h in h_list), reverse=True)
    base_step, h_ref = _base_step(oracle, h_list, h_fine)
    steps = [grid_steps(T, h) for h in h_list]

    logger.info(f"Ladder {model.name}/{levy.family}/{f.tag}: h={h_list}, {n_paths} paths, oracle={oracle}")
    jobs = _batch_jobs(n_paths, batch_size, path_offset, coupled, seed=seed, T=T, base_step=base_step,
                       x0=float(x0), h_list=tuple(h_list), oracle=oracle, h_ref=h_ref, tol=tol)
    scheme, oracle_values = execute_batches((model, levy, f), jobs, workers=workers, reproducible=reproducible)

    # paths failing at any h are dropped from every row
    finite = _finite_paths(scheme, oracle_values)
    rows = []
    for i, h in enumerate(h_list):
        row = _weak_error_row(h, scheme[i], oracle_values, seed, steps[i], finite=finite)
        logger.info(f"h={h:g}: weak error {row.weak_error:.4g} (SE {row.stderr_coupled:.2g})")
        if not row.usable:
            logger.warning(f"h={h:g} is below the noise floor and is excluded from the order fit")
        rows.append(row)
    return rows


def estimate_weak_error(model: CoefficientModel, levy: LevyModel, f: TestFunction, x0: float, T: float,
                        h: float, n_paths: int, seed: int, oracle: str = "reference",
                        h_fine: Optional[float] = None, coupled: bool = True, tol: float = MC_ODE_TOL,
                        batch_size: int = DEFAULT_BATCH_SIZE, workers: int = 1, reproducible: bool = True,
                        path_offset: int = 0) -> WeakErrorRow:
    """One row: coupled pairs (oracle path, Wong-Zakai path) on shared streams."""
    return run_ladder(model, levy, f, x0, T, [h], n_paths, seed, oracle=oracle, h_fine=h_fine, coupled=coupled,
                      tol=tol, batch_size=batch_size, workers=workers, reproducible=reproducible,
                      path_offset=path_offset)[0]


def fit_convergence_order(rows: Sequence[WeakErrorRow]) -> Tuple[float, float, float]:
    """Least-squares slope of log weak_error against log h over the usable rows.

    Returns (order, intercept, r2); exp(intercept) is the empirical constant.
    """
    usable = [row for row in rows if row.usable and row.weak_error > 0]
    if len(usable) < 3:
        raise ValueError(f"Need at least 3 rows above the noise floor, got {len(usable)}")
    fit = stats.linregress(np.log([row.h for row in usable]), np.log([row.weak_error for row in usable]))
    return float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2)


def self_convergence_check(model: CoefficientModel, levy: LevyModel, f: TestFunction, x0: float, T: float,
                           h_fine: float, n_paths: int, seed: int, tol: float = MC_ODE_TOL,
                           batch_size: int = DEFAULT_BATCH_SIZE, workers: int = 1,
                           reproducible: bool = True) -> float:
    """|mean f(X^{h_fine}_T) - mean f(X^{h_fine/2}_T)| for the reference integrator on coupled streams."""
    half = h_fine / 2
    jobs = _batch_jobs(n_paths, batch_size, 0, True, seed=seed, T=T, base_step=half, x0=float(x0),
                       h_list=(h_fine,), oracle="reference", h_ref=half, tol=tol, scheme="reference")
    coarse, fine = execute_batches((model, levy, f), jobs, workers=workers, reproducible=reproducible)
    row = _weak_error_row(h_fine, coarse[0], fine, seed, grid_steps(T, h_fine))
    logger.info(f"Reference self-convergence at h_fine={h_fine:g}: {row.weak_error:.3g}")
    return row.weak_error


def assert_self_convergence(value: float, rows: Sequence[WeakErrorRow]) -> bool:
    """Raise ExperimentInvalidError unless value < 20% of the smallest usable weak error."""
    usable = [row.weak_error for row in rows if row.usable]
    if not usable:
        return True
    threshold = SELF_CONVERGENCE_FRACTION * min(usable)
    if value >= threshold:
        raise ExperimentInvalidError(
            f"Reference self-convergence {value:.3g} is not below {threshold:.3g} "
            f"({SELF_CONVERGENCE_FRACTION:.0%} of the smallest usable weak error)"
        )
    return True


def is_degenerate(rows: Sequence[WeakErrorRow]) -> bool:
    """Every row within the accumulated ODE tolerance of zero (scheme exact)."""
    return bool(rows) and all(
        row.weak_error <= 10 * row.n_steps * DEGENERATE_ODE_TOL + NOISE_FLOOR_SIGMAS * row.stderr_coupled
        for row in rows
    )


def summarize_ladder(model: CoefficientModel, levy: LevyModel, f: TestFunction, oracle: str,
                     rows: Sequence[WeakErrorRow], ci_level: float = 0.99,
                     self_convergence: Optional[float] = None) -> WeakErrorReport:
    """Fit, confidence intervals and verdict of a ladder."""
    rows = sorted(rows, key=lambda row: row.h, reverse=True)
    z = float(stats.norm.ppf(0.5 + ci_level / 2))
    report = WeakErrorReport(
        model=model.name, levy=levy.family, test_function=f.tag, oracle=oracle, rows=rows,
        ci_level=ci_level, ci_half_width=[z * row.stderr_coupled for row in rows],
        self_convergence=self_convergence,
    )
    if self_convergence is not None:
        try:
            report.self_convergence_ok = assert_self_convergence(self_convergence, rows)
        except ExperimentInvalidError as e:
            report.self_convergence_ok = False
            report.message = str(e)

    if is_degenerate(rows):
        report.verdict = "degenerate: scheme exact"
        report.passed = True
        report.message = report.message or "weak error within the accumulated ODE tolerance at every h"
        return report

    try:
        order, intercept, r2 = fit_convergence_order(rows)
    except ValueError as e:
        report.verdict = "fail"
        report.message = report.message or str(e)
        return report

    report.fitted_order, report.fit_intercept, report.fit_r2 = order, intercept, r2
    low, high = ORDER_ACCEPTANCE
    report.passed = low <= order <= high and report.self_convergence_ok is not False
    report.verdict = "pass" if report.passed else "fail"
    logger.info(f"Fitted order {order:.3f} (r2 {r2:.3f}, C {np.exp(intercept):.3g}): {report.verdict}")
    return report


def save_report(report: WeakErrorReport, output_dir: str) -> Dict[str, str]:
    """Write weak_error.csv and the log2 plot data of the usable rows."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    frame = pd.DataFrame([row.model_dump() for row in report.rows], columns=WEAK_ERROR_COLUMNS)
    csv_path = out / OUTPUT_FILES["weak_error"]
    frame.to_csv(csv_path, index=False, float_format=CSV_FLOAT_FORMAT)

    usable = [row for row in report.rows if row.usable and row.weak_error > 0]
    plot = pd.DataFrame({
        "log2_h": np.log2([row.h for row in usable]),
        "log2_weak_error": np.log2([row.weak_error for row in usable]),
    })
    plot_path = out / OUTPUT_FILES["plot_data"]
    plot.to_csv(plot_path, sep=" ", index=False, float_format=CSV_FLOAT_FORMAT)

    logger.info(f"Saved {csv_path} and {plot_path}")
    return {"weak_error": str(csv_path), "plot_data": str(plot_path)}


def estimate_one_step_error(model: CoefficientModel, levy: LevyModel, f: TestFunction, xs: Sequence[float],
                            h_list: Sequence[float], n_paths: int, seed: int,
                            fine_ratio: int = DEFAULT_FINE_RATIO, tol: float = MC_ODE_TOL,
                            batch_size: int = DEFAULT_BATCH_SIZE) -> List[OneStepRow]:
    """|E_x f(X_h) - E_x f(Xbar_h)| per (x, h), with the constant error / (h^2 (1 + x^4))."""
    rows = []
    for x in xs:
        for h in h_list:
            h_ref = h / fine_ratio
            jobs = _batch_jobs(n_paths, batch_size, 0, True, seed=seed, T=h, base_step=h_ref, x0=float(x),
                               h_list=(h,), oracle="reference", h_ref=h_ref, tol=tol)
            scheme, oracle = execute_batches((model, levy, f), jobs)
            row = _weak_error_row(h, scheme[0], oracle, seed, 1)
            rows.append(OneStepRow(
                h=h, x=float(x), est_scheme=row.est_scheme, est_reference=row.est_oracle, error=row.weak_error,
                stderr=row.stderr_coupled, constant=row.weak_error / (h ** 2 * (1 + float(x) ** 4)),
            ))
    return rows


def estimate_moment_bound(model: CoefficientModel, levy: LevyModel, x0: float, T: float,
                          h_list: Sequence[float], n_paths: int, seed: int, tol: float = MC_ODE_TOL,
                          batch_size: int = DEFAULT_BATCH_SIZE) -> List[MomentBoundRow]:
    """max_k E|Xbar_kh|^4 and E max_k |Xbar_kh|^4 of the scheme for each h.

    Coordinates of a diagonal model count as separate samples.
    """
    rows = []
    for h in h_list:
        fourth_sum = None
        running_max = []
        for start in range(0, n_paths, batch_size):
            indices = range(start, min(start + batch_size, n_paths))
            noise = NoiseBatch.generate(levy, seed, indices, T, h, dim=model.dim_state)
            states = simulate_wz_batch(model, noise, x0, h, tol=tol, record=True)
            fourth = states.reshape(-1, states.shape[-1]) ** 4
            fourth_sum = fourth.sum(axis=0) if fourth_sum is None else fourth_sum + fourth.sum(axis=0)
            running_max.append(fourth.max(axis=1))
        maxima = np.concatenate(running_max)
        if not np.all(np.isfinite(maxima)):
            raise PathFailureError(f"Non-finite scheme states at h={h}")
        mean_max = float(maxima.mean())
        rows.append(MomentBoundRow(h=h, max_mean_fourth=float(np.max(fourth_sum / maxima.size)),
                                   mean_max_fourth=mean_max, constant=mean_max / (1 + x0 ** 4)))
        logger.info(f"Fourth moment at h={h:g}: E max |X|^4 = {mean_max:.4g}")
    return rows
