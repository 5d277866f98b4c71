"""
Pydantic models for experiment configuration, reports and the HTTP API
"""

from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Optional, Dict, Any, List, Literal
from datetime import datetime

from app.config import (
    MODEL_CATALOG, LEVY_CATALOG, TEST_FUNCTION_CATALOG, ORACLES,
    DEFAULT_SMALL_JUMP_TRUNCATION, DEFAULT_FINE_RATIO, DEFAULT_N_PATHS, DEFAULT_SEED,
    DEFAULT_BATCH_SIZE, DEFAULT_H_LADDER, DEFAULT_T, MC_ODE_TOL, DEFAULT_IDENTITY_TOL,
    DEFAULT_FD_STEP, DEFAULT_OUTPUT_DIR, MAX_STEPS, resolve_params,
)

Verdict = Literal["pass", "numerically-unbounded", "unknown"]
TailVerdict = Literal["finite", "infinite", "inconclusive"]


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

class ModelSection(BaseModel):
    """[model] section: coefficient model by name."""
    name: str = Field(..., description="Builtin coefficient model")
    params: List[float] = Field(default=[], description="Model parameters in catalog order")
    dim: int = Field(default=1, ge=1, description="State dimension (diagonal extension of the scheme)")

    @model_validator(mode="after")
    def _resolve(self):
        self.params = resolve_params(MODEL_CATALOG, "model", self.name, self.params)
        return self


class LevySection(BaseModel):
    """[levy] section: jump noise family."""
    family: str = Field(..., description="Levy family")
    params: List[float] = Field(default=[], description="Family parameters in catalog order")
    truncation: float = Field(default=DEFAULT_SMALL_JUMP_TRUNCATION, gt=0, le=1,
                              description="Small-jump truncation delta (infinite-activity families)")

    @model_validator(mode="after")
    def _resolve(self):
        self.params = resolve_params(LEVY_CATALOG, "Levy family", self.family, self.params)
        return self


class RunSection(BaseModel):
    """[run] section: test function, grid and Monte Carlo settings."""
    test_function: str = Field(default="gaussian_bump", description="Test function family")
    f_params: List[float] = Field(default=[], description="Test function parameters")
    x0: float = Field(default=0.5, description="Initial state")
    T: float = Field(default=DEFAULT_T, gt=0, description="Time horizon")
    h_list: List[float] = Field(default_factory=lambda: list(DEFAULT_H_LADDER), description="Step ladder, strictly decreasing")
    h_fine: Optional[float] = Field(default=None, gt=0, description="Reference step; default min(h_list)/64")
    n_paths: int = Field(default=DEFAULT_N_PATHS, ge=1, description="Coupled path pairs per row")
    seed: int = Field(default=DEFAULT_SEED, ge=0, lt=2 ** 64, description="Root seed")
    oracle: str = Field(default="reference", description="reference or exact_linear")
    ode_tol: float = Field(default=MC_ODE_TOL, gt=0, description="ODE tolerance inside path loops")
    identity_tol: float = Field(default=DEFAULT_IDENTITY_TOL, gt=0, description="Tolerance of the generator identity check")
    fd_step: float = Field(default=DEFAULT_FD_STEP, gt=0, description="Finite-difference step for Q")
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, ge=1, description="Paths per worker batch")
    ci_level: float = Field(default=0.99, gt=0, lt=1, description="Confidence level reported with the estimates")
    output_dir: str = Field(default=DEFAULT_OUTPUT_DIR, description="Directory for CSV and plot-data files")

    @field_validator("oracle")
    @classmethod
    def _known_oracle(cls, value: str) -> str:
        if value not in ORACLES:
            raise ValueError(f"Unknown oracle: {value}. Available: {list(ORACLES)}")
        return value

    @field_validator("h_list")
    @classmethod
    def _decreasing(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("h_list must not be empty")
        if any(h <= 0 for h in value):
            raise ValueError("h_list entries must be positive")
        if any(later >= earlier for earlier, later in zip(value, value[1:])):
            raise ValueError(f"h_list must be strictly decreasing, got {value}")
        return value

    @model_validator(mode="after")
    def _check_grid(self):
        self.f_params = resolve_params(TEST_FUNCTION_CATALOG, "test function", self.test_function, self.f_params)
        if self.h_fine is None:
            self.h_fine = min(self.h_list) / DEFAULT_FINE_RATIO
        if self.h_fine > min(self.h_list):
            raise ValueError(f"h_fine={self.h_fine} exceeds the smallest step {min(self.h_list)}")
        if self.T / self.h_fine > MAX_STEPS:
            raise ValueError(f"T/h_fine = {self.T / self.h_fine:.3g} exceeds {MAX_STEPS} steps")
        for h in self.h_list:
            if h > self.T:
                raise ValueError(f"Step {h} exceeds the horizon T={self.T}")
            if not _is_multiple(self.T, h):
                raise ValueError(f"T={self.T} is not a multiple of h={h}")
            if not _is_multiple(h, self.h_fine):
                raise ValueError(f"h={h} is not a multiple of h_fine={self.h_fine}")
        return self


def _is_multiple(value: float, step: float) -> bool:
    ratio = value / step
    return abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio)


class ExperimentConfig(BaseModel):
    """Complete experiment description; the INI file maps one section per field."""
    model: ModelSection
    levy: LevySection
    run: RunSection = Field(default_factory=RunSection)

    @model_validator(mode="after")
    def _oracle_fits_model(self):
        if self.run.oracle == "exact_linear" and self.model.name != "linear":
            raise ValueError("oracle=exact_linear requires the linear model")
        if self.run.test_function == "identity" and self.run.oracle != "exact_linear":
            raise ValueError("test_function=identity is admissible only with oracle=exact_linear")
        return self

    class Config:
        json_schema_extra = {
            "example": {
                "model": {"name": "bounded_trig", "params": [0.3, 0.4, 0.5]},
                "levy": {"family": "compound_poisson_normal", "params": [1.0, 0.0, 0.5]},
                "run": {
                    "test_function": "gaussian_bump",
                    "x0": 0.5,
                    "T": 1.0,
                    "h_list": [0.25, 0.125, 0.0625, 0.03125, 0.015625],
                    "h_fine": 0.000244140625,
                    "n_paths": 100000,
                    "seed": 20240611,
                },
            }
        }


# ---------------------------------------------------------------------------
# Hypothesis and bound reports
# ---------------------------------------------------------------------------

class HypothesisClause(BaseModel):
    """One sup-norm clause of the coefficient hypothesis."""
    clause: str = Field(..., description="Printable clause, e.g. ||c^(2)||")
    kind: Literal["derivative", "product"] = Field(..., description="Derivative bound or product condition")
    coefficient: str = Field(..., description="a, b or c")
    order: int = Field(..., ge=1, le=4, description="Derivative order")
    empirical_sup: Optional[float] = Field(None, description="Sup over the state grid")
    catalog_bound: Optional[float] = Field(None, description="Declared bound, if any")
    verdict: Verdict = Field(..., description="pass / numerically-unbounded / unknown")


class HypothesisReport(BaseModel):
    """Report of the coefficient sup-norm hypothesis check."""
    model: str = Field(..., description="Model name")
    grid_points: int = Field(..., ge=0, description="State grid size")
    clauses: List[HypothesisClause] = Field(default=[], description="Per-clause results")
    passed: bool = Field(..., description="All clauses pass")


class MomentReport(BaseModel):
    """Exponential-moment check of the big-jump tail."""
    family: str = Field(..., description="Levy family")
    c_prime_bound: float = Field(..., ge=0, description="Bound on |c'| used in the exponent")
    exponent_rate: float = Field(..., ge=0, description="Effective rate k in |z|^3 exp(k|z|)")
    entry_norm: bool = Field(default=False, description="Entry-norm variant of the hypothesis")
    value: Optional[float] = Field(None, description="Integral over |z|>1 (None when infinite or beyond float range)")
    log_value: Optional[float] = Field(None, description="Natural log of the integral when finite and nonzero")
    verdict: TailVerdict = Field(..., description="finite / infinite / inconclusive")
    method: str = Field(..., description="How the value was obtained")


class GradientMomentClause(BaseModel):
    """One integral of |d^k phi^z / dx^k|^p over the big jumps."""
    order: int = Field(..., ge=1, le=4)
    power: float = Field(..., gt=0)
    value: Optional[float] = Field(None, description="Max over sample states of the integral")
    verdict: TailVerdict


class GradientMomentReport(BaseModel):
    """Check of the flow-gradient moment hypothesis over big jumps."""
    family: str
    model: str
    states: List[float] = Field(default=[], description="Sample states x")
    clauses: List[GradientMomentClause] = Field(default=[])
    passed: bool


class BoundReport(BaseModel):
    """Flow-derivative envelope assertions over (x, z) samples."""
    model: str = Field(..., description="Model name")
    n_samples: int = Field(..., ge=0)
    violations: List[int] = Field(..., description="Violations per derivative order 1..4")
    max_ratio: List[float] = Field(..., description="max |phi_k| / envelope_k per order")
    empirical_constants: List[float] = Field(..., description="max |phi_k| / (|z|^(k-1) e^(s_k |c'||z|))")
    remainder_samples: int = Field(default=0, description="Samples with |z|<=1 used for the remainder bound")
    remainder_violations: int = Field(default=0)
    remainder_constant: Optional[float] = Field(None, description="max |remainder| / (z^2 |c(x)|)")
    passed: bool


class PsiGrowthReport(BaseModel):
    """Spot check of one-step map sensitivities against the exponential growth shape."""
    model: str
    n_samples: int
    constants: Dict[str, float] = Field(..., description="Empirical constants for psi_tau, psi_w, psi_z")
    fd_discrepancy: float = Field(..., description="Max gap between integrated and finite-difference sensitivities")
    passed: bool


class IdentityReport(BaseModel):
    """Generator identity check over a grid of states."""
    model: str
    test_function: str
    n_states: int
    max_discrepancy: float
    worst_state: Optional[float] = None
    tol: float
    passed: bool


class VerifyCheck(BaseModel):
    """One line of the verification table."""
    check: str = Field(..., description="Check name")
    subject: str = Field(..., description="What the check was applied to")
    value: Optional[float] = Field(None, description="Headline number of the check")
    verdict: str = Field(..., description="Verdict string")
    passed: bool
    detail: str = Field(default="", description="Explanatory line")


class VerificationReport(BaseModel):
    """Aggregated verification suite result."""
    model: str
    levy: str
    checks: List[VerifyCheck] = Field(default=[])
    passed: bool
    timestamp: datetime = Field(default_factory=datetime.now)


# ---------------------------------------------------------------------------
# Monte Carlo reports
# ---------------------------------------------------------------------------

class WeakErrorRow(BaseModel):
    """Coupled weak-error estimate at one step size."""
    h: float = Field(..., gt=0)
    n_paths: int = Field(..., ge=0, description="Paths used (failures excluded)")
    est_scheme: float = Field(..., description="Mean of f at the scheme endpoint")
    est_oracle: float = Field(..., description="Mean of f at the oracle endpoint")
    weak_error: float = Field(..., ge=0, description="|mean of the coupled difference|")
    stderr_scheme: float = Field(..., ge=0)
    stderr_coupled: float = Field(..., ge=0)
    seed: int
    n_steps: int = Field(default=0, ge=0)
    failures: int = Field(default=0, ge=0)
    usable: bool = Field(default=True, description="Above the noise floor, used by the order fit")


class WeakErrorReport(BaseModel):
    """Weak-error ladder with the fitted convergence order."""
    model: str
    levy: str
    test_function: str
    oracle: str
    rows: List[WeakErrorRow] = Field(default=[])
    fitted_order: Optional[float] = None
    fit_intercept: Optional[float] = Field(None, description="log of the empirical constant C")
    fit_r2: Optional[float] = None
    ci_level: float = 0.99
    ci_half_width: List[float] = Field(default=[], description="Half widths of the coupled CIs per row")
    self_convergence: Optional[float] = None
    self_convergence_ok: Optional[bool] = None
    verdict: str = Field(default="pending", description="pass / fail / degenerate: scheme exact")
    passed: bool = False
    message: str = ""


class OneStepRow(BaseModel):
    """One-step weak error at a single (h, x)."""
    h: float
    x: float
    est_scheme: float
    est_reference: float
    error: float
    stderr: float
    constant: float = Field(..., description="error / (h^2 (1 + x^4))")


class MomentBoundRow(BaseModel):
    """Fourth-moment statistics of the scheme at one step size."""
    h: float
    max_mean_fourth: float = Field(..., description="max_k E|X_kh|^4")
    mean_max_fourth: float = Field(..., description="E max_k |X_kh|^4")
    constant: float = Field(..., description="mean_max_fourth / (1 + x0^4)")


# ---------------------------------------------------------------------------
# API payloads
# ---------------------------------------------------------------------------

class ConvergeRequest(BaseModel):
    """Body of POST /converge."""
    config: ExperimentConfig
    write_files: bool = Field(default=False, description="Write CSV and plot-data files")
    workers: int = Field(default=1, ge=1, description="Worker processes")
    reproducible: bool = Field(default=True, description="Fixed-order reduction")


class CatalogResponse(BaseModel):
    """Selectable models, Levy families and test functions."""
    models: Dict[str, Dict[str, Any]]
    levy_families: Dict[str, Dict[str, Any]]
    test_functions: Dict[str, Dict[str, Any]]
    oracles: List[str]


class ErrorResponse(BaseModel):
    """Model for error responses."""
    error: str = Field(..., description="Error type")
    message: str = Field(..., description="Error message")
    detail: Optional[str] = Field(None, description="Detailed error information")
    timestamp: datetime = Field(default_factory=datetime.now, description="Error timestamp")


class HealthResponse(BaseModel):
    """Model for health check response."""
    status: str = Field(..., description="Health status")
    message: str = Field(..., description="Health message")
    version: str = Field(..., description="API version")
    timestamp: datetime = Field(default_factory=datetime.now, description="Health check timestamp")
    dependencies: Dict[str, str] = Field(default={}, description="Dependency status")


class APIInfo(BaseModel):
    """Model for API information response."""
    message: str = Field(..., description="API welcome message")
    version: str = Field(..., description="API version")
    endpoints: Dict[str, str] = Field(..., description="Available endpoints")
    documentation: Dict[str, str] = Field(..., description="Documentation links")
