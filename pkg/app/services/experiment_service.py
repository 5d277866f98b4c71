"""
Experiment orchestration behind the converge, verify and paths commands
"""

import logging
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from app.config import (
    DEFAULT_ODE_TOL, MAX_EXPORT_PATHS, OUTPUT_FILES, VERIFY_BOUND_SAMPLES, VERIFY_BOUND_MAX_STATE,
    VERIFY_BOUND_MAX_JUMP, VERIFY_IDENTITY_POINTS, VERIFY_IDENTITY_RANGE,
)
from app.models import ExperimentConfig, VerificationReport, VerifyCheck, WeakErrorReport
from app.services.coefficients_service import CoefficientModel, builtin_model, check_habc
from app.services.flow_service import (
    assert_appendix_bounds, check_h_grad_phi_nu, check_psi_growth, ito_jump_size, marcus_jump_size,
)
from app.services.generator_service import TestFunction, generator_growth, test_function, verify_L_equals_Q
from app.services.integrator_service import (
    EffectiveDrift, NoiseBatch, exact_linear_batch, path_frame, simulate_reference_batch,
    simulate_wz_batch, wz_dense_output,
)
from app.services.levy_service import IncrementStream, LevyModel, check_hnu, levy_model
from app.services.montecarlo_service import (
    CSV_FLOAT_FORMAT, run_ladder, save_report, self_convergence_check, summarize_ladder,
)

logger = logging.getLogger(__name__)

VERIFY_COLUMNS = ["check", "subject", "value", "verdict"]
GROWTH_RANGE = 20.0
GROWTH_POINTS = 81
GRADIENT_STATES = 7
PSI_GROWTH_SAMPLES = 200
JUMP_COMPARISON_SAMPLES = 64

Problem = Tuple[CoefficientModel, LevyModel, TestFunction]


def appendix_bound_sample(rng: np.random.Generator, n: int = VERIFY_BOUND_SAMPLES,
                          max_state: float = VERIFY_BOUND_MAX_STATE,
                          max_jump: float = VERIFY_BOUND_MAX_JUMP) -> np.ndarray:
    """(x, z) pairs, uniform on [-max_state, max_state] x [-max_jump, max_jump]."""
    xs = rng.uniform(-max_state, max_state, n)
    zs = rng.uniform(-max_jump, max_jump, n)
    return np.column_stack([xs, zs])


class ExperimentService:
    """Runs configured experiments and writes their output files."""

    def __init__(self, workers: int = 1, reproducible: bool = True):
        self.workers = workers
        self.reproducible = reproducible

    def build_problem(self, config: ExperimentConfig) -> Problem:
        """Coefficient model, Levy model and test function named by the config."""
        model = builtin_model(config.model.name, config.model.params, dim=config.model.dim)
        levy = levy_model(config.levy.family, config.levy.params, config.levy.truncation)
        f = test_function(config.run.test_function, config.run.f_params)
        return model, levy, f

    # ------------------------------------------------------------------
    # converge
    # ------------------------------------------------------------------

    def run_convergence(self, config: ExperimentConfig, write_files: bool = True) -> WeakErrorReport:
        """
        Run the h ladder against the configured oracle and fit the weak order.

        Args:
            config: Validated experiment config
            write_files: Write weak_error.csv and the plot data into run.output_dir

        Returns:
            WeakErrorReport with rows, fit and verdict
        """
        model, levy, f = self.build_problem(config)
        run = config.run
        logger.info(f"Convergence experiment: {model.name} / {levy.family} / {f.tag}, seed {run.seed}")

        rows = run_ladder(
            model, levy, f, run.x0, run.T, run.h_list, run.n_paths, run.seed, oracle=run.oracle,
            h_fine=run.h_fine, tol=run.ode_tol, batch_size=run.batch_size, workers=self.workers,
            reproducible=self.reproducible,
        )
        self_convergence = None
        if run.oracle == "reference":
            self_convergence = self_convergence_check(
                model, levy, f, run.x0, run.T, run.h_fine, run.n_paths, run.seed, tol=run.ode_tol,
                batch_size=run.batch_size, workers=self.workers, reproducible=self.reproducible,
            )
        report = summarize_ladder(model, levy, f, run.oracle, rows, ci_level=run.ci_level,
                                  self_convergence=self_convergence)
        if write_files:
            save_report(report, run.output_dir)
        logger.info(f"Convergence experiment finished: {report.verdict}")
        return report

    # ------------------------------------------------------------------
    # verify
    # ------------------------------------------------------------------

    def run_verification(self, config: ExperimentConfig, write_files: bool = True) -> VerificationReport:
        """Hypothesis checks, flow bounds and the generator identity for the configured model."""
        model, levy, f = self.build_problem(config)
        run = config.run
        rng = np.random.default_rng(run.seed)
        checks: List[VerifyCheck] = []
        logger.info(f"Verification suite: {model.name} / {levy.family} / {f.tag}")

        habc = check_habc(model)
        failing = [c.clause for c in habc.clauses if c.verdict != "pass"]
        checks.append(VerifyCheck(
            check="H_abc", subject=model.name, value=float(len(failing)),
            verdict="pass" if habc.passed else "fail", passed=habc.passed,
            detail=f"clauses not passing: {', '.join(failing)}" if failing else "",
        ))

        c_prime = model.c_prime_bound
        for name, entry_norm in (("H_nu", False), ("H'_nu", True)):
            moment = check_hnu(levy, c_prime, entry_norm=entry_norm,
                               dim_state=model.dim_state, dim_noise=model.dim_noise)
            detail = moment.method
            if moment.value is None and moment.log_value is not None:
                detail = f"{detail}: log value {moment.log_value:.6g}"
            if moment.verdict == "infinite":
                detail = f"{levy.family} tails carry no |z|^3 exp({moment.exponent_rate:g}|z|) moment: {moment.method}"
            checks.append(VerifyCheck(check=name, subject=levy.family, value=moment.value,
                                      verdict=moment.verdict, passed=moment.verdict == "finite", detail=detail))

        states = np.linspace(-VERIFY_IDENTITY_RANGE, VERIFY_IDENTITY_RANGE, GRADIENT_STATES)
        gradient = check_h_grad_phi_nu(model, levy, states)
        verdicts = [clause.verdict for clause in gradient.clauses]
        worst = "infinite" if "infinite" in verdicts else "inconclusive" if "inconclusive" in verdicts else "finite"
        values = [clause.value for clause in gradient.clauses if clause.value is not None]
        checks.append(VerifyCheck(check="H_grad_phi_nu", subject=f"{model.name}/{levy.family}",
                                  value=max(values) if values else None, verdict=worst, passed=gradient.passed,
                                  detail=", ".join(f"k={c.order}: {c.verdict}" for c in gradient.clauses)))

        bounds = assert_appendix_bounds(model, appendix_bound_sample(rng))
        checks.append(VerifyCheck(
            check="flow_derivative_bounds", subject=model.name, value=float(sum(bounds.violations)),
            verdict="pass" if bounds.passed else "fail", passed=bounds.passed,
            detail=f"violations per order {bounds.violations}, remainder violations {bounds.remainder_violations}",
        ))

        sample = np.column_stack([
            rng.uniform(-VERIFY_IDENTITY_RANGE, VERIFY_IDENTITY_RANGE, PSI_GROWTH_SAMPLES),
            rng.uniform(0.0, 1.0, PSI_GROWTH_SAMPLES),
            rng.standard_normal(PSI_GROWTH_SAMPLES),
            rng.uniform(-2.0, 2.0, PSI_GROWTH_SAMPLES),
        ])
        growth = check_psi_growth(model, sample, fd_step=run.fd_step)
        checks.append(VerifyCheck(check="psi_growth", subject=model.name, value=growth.fd_discrepancy,
                                  verdict="pass" if growth.passed else "fail", passed=growth.passed,
                                  detail=", ".join(f"{k}: {v:.3g}" for k, v in growth.constants.items())))

        ed = EffectiveDrift.build(model, levy, tol=DEFAULT_ODE_TOL)
        states = np.linspace(-VERIFY_IDENTITY_RANGE, VERIFY_IDENTITY_RANGE, VERIFY_IDENTITY_POINTS)
        identity = verify_L_equals_Q(model, ed, f, states, tol=run.identity_tol, fd_step=run.fd_step)
        checks.append(VerifyCheck(check="L_equals_Q", subject=f"{model.name}/{f.tag}",
                                  value=identity.max_discrepancy, verdict="pass" if identity.passed else "fail",
                                  passed=identity.passed, detail=f"tol {identity.tol:g}, worst state {identity.worst_state}"))

        grid = np.linspace(-GROWTH_RANGE, GROWTH_RANGE, GROWTH_POINTS)
        l_growth = generator_growth(model, ed, f, grid)
        bounded = bool(np.isfinite(l_growth["sup_ratio"]))
        checks.append(VerifyCheck(check="generator_growth", subject=f"{model.name}/{f.tag}",
                                  value=l_growth["sup_ratio"], verdict="bounded" if bounded else "unbounded",
                                  passed=bounded, detail=f"constant {l_growth['constant']:.3g}"))

        checks.append(self._jump_comparison(model, levy, run.seed))

        report = VerificationReport(model=model.name, levy=levy.family, checks=checks,
                                    passed=all(check.passed for check in checks))
        if write_files:
            self.save_verification(report, run.output_dir)
        log = logger.info if report.passed else logger.warning
        log(f"Verification suite finished: {'all checks pass' if report.passed else 'some checks failed'}")
        return report

    def _jump_comparison(self, model: CoefficientModel, levy: LevyModel, seed: int) -> VerifyCheck:
        """Marcus jump phi^z(x) - x against the Ito jump c(x) z on sampled jumps (informational)."""
        generator = IncrementStream(seed, 0).generator("jumps")
        sizes = levy.sample_jumps(generator, JUMP_COMPARISON_SAMPLES) if levy.jump_rate > 0 else np.zeros(0)
        sizes = sizes[np.abs(sizes) <= VERIFY_BOUND_MAX_JUMP]
        if sizes.size == 0:
            return VerifyCheck(check="marcus_vs_ito", subject=levy.family, value=0.0, verdict="no jumps",
                               passed=True)
        xs = generator.uniform(-VERIFY_IDENTITY_RANGE, VERIFY_IDENTITY_RANGE, sizes.size)
        gap = np.abs(np.asarray(marcus_jump_size(model, xs, sizes)) - np.asarray(ito_jump_size(model, xs, sizes)))
        return VerifyCheck(check="marcus_vs_ito", subject=levy.family, value=float(gap.max()),
                           verdict="informational", passed=True,
                           detail=f"max |Marcus jump - Ito jump| over {sizes.size} sampled jumps")

    def save_verification(self, report: VerificationReport, output_dir: str) -> str:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame([check.model_dump() for check in report.checks], columns=VERIFY_COLUMNS)
        path = out / OUTPUT_FILES["verify"]
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        logger.info(f"Verification table saved to {path}")
        return str(path)

    # ------------------------------------------------------------------
    # paths
    # ------------------------------------------------------------------

    def export_paths(self, config: ExperimentConfig, n: int, dense: int = 0,
                     write_files: bool = True) -> Dict[str, pd.DataFrame]:
        """Coupled scheme and oracle trajectories of paths 0..n-1 on the grid of the smallest h.

        With dense > 0 the continuous-time scheme is also evaluated at dense
        points per step. Diagonal models add a coord column to both frames.
        """
        if not 1 <= n <= MAX_EXPORT_PATHS:
            raise ValueError(f"Path export needs 1 <= n <= {MAX_EXPORT_PATHS}, got {n}")
        if dense < 0:
            raise ValueError(f"dense must be non-negative, got {dense}")
        model, levy, _ = self.build_problem(config)
        run = config.run
        h = min(run.h_list)
        if run.oracle == "reference":
            base_step = run.h_fine
        else:
            base_step = h / dense if dense else h
        noise = NoiseBatch.generate(levy, run.seed, range(n), run.T, base_step, dim=model.dim_state)

        scheme = simulate_wz_batch(model, noise, run.x0, h, tol=run.ode_tol, record=True)
        times = np.arange(scheme.shape[-1]) * h
        frames = {"paths": path_frame(noise.path_indices, times, scheme,
                                      self._oracle_states(model, noise, config, h))}
        if dense:
            dense_times, dense_states = wz_dense_output(model, noise, scheme, h, dense, tol=run.ode_tol)
            oracle = self._oracle_states(model, noise, config, h / dense)
            frames["paths_dense"] = path_frame(noise.path_indices, dense_times, dense_states, oracle)

        if write_files:
            out = Path(run.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            for key, frame in frames.items():
                path = out / OUTPUT_FILES[key]
                frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
                logger.info(f"Exported {n} paths to {path}")
        return frames

    def _oracle_states(self, model: CoefficientModel, noise: NoiseBatch, config: ExperimentConfig,
                       h: float) -> np.ndarray:
        """Oracle trajectories sampled on the grid k*h."""
        run = config.run
        if run.oracle == "exact_linear":
            return exact_linear_batch(model, noise, run.x0, h, record=True)
        states = simulate_reference_batch(model, noise, run.x0, run.h_fine, tol=run.ode_tol, record=True)
        stride = noise.ratio(h) // noise.ratio(run.h_fine)
        return states[..., ::stride]
