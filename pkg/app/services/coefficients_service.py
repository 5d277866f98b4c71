"""
Coefficient models (a, b, c) with analytic derivatives and the H_{a,b,c} checker
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import (
    HABC_GRID_HALF_WIDTH, HABC_GRID_POINTS, HABC_NORMAL_POINTS, HABC_GRID_SEED,
    HABC_GRID_EXPANSIONS, UNBOUNDED_GROWTH_FACTOR, MODEL_CATALOG, resolve_params,
)
from app.models import HypothesisClause, HypothesisReport

logger = logging.getLogger(__name__)

Coefficient = Callable[[np.ndarray], np.ndarray]
Derivative = Callable[[np.ndarray, int], np.ndarray]

COEFFICIENT_NAMES = ("a", "b", "c")
MAX_ORDER = 4


def deriv_key(name: str, order: int) -> str:
    """Catalog key of ||name^(order)||, e.g. c1 for ||c'||."""
    return f"{name}{order}"


def product_key(name: str, order: int) -> str:
    """Catalog key of ||name * name^(order)||, e.g. cc2 for ||c c''||."""
    return f"{name}{name}{order}"


@dataclass(frozen=True)
class CoefficientModel:
    """SDE coefficients with analytic derivatives up to order 4.

    Coefficients act elementwise on state arrays, so a d-dimensional diagonal
    model is the same callable applied to arrays whose last axis has length d.
    """
    name: str
    params: Tuple[float, ...]
    a: Coefficient
    b: Coefficient
    c: Coefficient
    deriv_a: Derivative
    deriv_b: Derivative
    deriv_c: Derivative
    bound_catalog: Dict[str, float] = field(default_factory=dict)
    dim_state: int = 1
    dim_noise: int = 1
    c_is_constant: bool = False

    def coefficient(self, which: str) -> Coefficient:
        if which not in COEFFICIENT_NAMES:
            raise ValueError(f"Unknown coefficient: {which}")
        return getattr(self, which)

    def derivative(self, which: str, x, order: int) -> np.ndarray:
        """Value (order 0) or analytic derivative of a, b or c at x."""
        x = np.asarray(x, dtype=float)
        if order == 0:
            return self.coefficient(which)(x)
        if not 1 <= order <= MAX_ORDER:
            raise ValueError(f"Derivative order must be in 0..{MAX_ORDER}, got {order}")
        return getattr(self, f"deriv_{which}")(x, order)

    def bound(self, key: str) -> float:
        """Recorded sup-norm; inf when the model author declared none."""
        return float(self.bound_catalog.get(key, math.inf))

    @property
    def c_prime_bound(self) -> float:
        return self.bound(deriv_key("c", 1))

    def lipschitz_bounds(self) -> Tuple[float, float, float]:
        """(||a'||, ||b'||, ||c'||) used for substep selection; unknown bounds count as 1."""
        values = []
        for name in COEFFICIENT_NAMES:
            bound = self.bound(deriv_key(name, 1))
            values.append(bound if math.isfinite(bound) else 1.0)
        return tuple(values)

    def stratonovich_correction(self, x) -> np.ndarray:
        """1/2 b'(x) b(x)."""
        x = np.asarray(x, dtype=float)
        return 0.5 * self.deriv_b(x, 1) * self.b(x)


def _zeros(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(np.asarray(x, dtype=float))


def _linear_parts(slope: float) -> Tuple[Coefficient, Derivative]:
    def value(x):
        return slope * np.asarray(x, dtype=float)

    def deriv(x, order):
        return np.full_like(np.asarray(x, dtype=float), slope) if order == 1 else _zeros(x)

    return value, deriv


def _constant_parts(level: float) -> Tuple[Coefficient, Derivative]:
    def value(x):
        return np.full_like(np.asarray(x, dtype=float), level)

    def deriv(x, order):
        return _zeros(x)

    return value, deriv


def _sine_parts(amplitude: float, phase: float) -> Tuple[Coefficient, Derivative]:
    # amplitude * sin(x + phase); k-th derivative shifts the phase by k*pi/2
    def value(x):
        return amplitude * np.sin(np.asarray(x, dtype=float) + phase)

    def deriv(x, order):
        return amplitude * np.sin(np.asarray(x, dtype=float) + phase + order * math.pi / 2)

    return value, deriv


def _linear_model(params: Sequence[float], dim: int) -> CoefficientModel:
    alpha, beta, jump = params
    a, da = _linear_parts(alpha)
    b, db = _linear_parts(beta)
    c, dc = _linear_parts(jump)
    catalog = {}
    for name, slope in zip(COEFFICIENT_NAMES, (alpha, beta, jump)):
        catalog[deriv_key(name, 1)] = abs(slope)
        for order in range(2, MAX_ORDER + 1):
            catalog[deriv_key(name, order)] = 0.0
    for name in ("b", "c"):
        for order in range(2, MAX_ORDER + 1):
            catalog[product_key(name, order)] = 0.0
    return CoefficientModel(
        name="linear", params=tuple(params), a=a, b=b, c=c,
        deriv_a=da, deriv_b=db, deriv_c=dc, bound_catalog=catalog,
        dim_state=dim, dim_noise=dim, c_is_constant=(jump == 0.0),
    )


def _constant_model(params: Sequence[float], dim: int) -> CoefficientModel:
    a0, b0, c0 = params
    a, da = _constant_parts(a0)
    b, db = _constant_parts(b0)
    c, dc = _constant_parts(c0)
    catalog = {deriv_key(name, order): 0.0
               for name in COEFFICIENT_NAMES for order in range(1, MAX_ORDER + 1)}
    catalog.update({product_key(name, order): 0.0
                    for name in ("b", "c") for order in range(2, MAX_ORDER + 1)})
    return CoefficientModel(
        name="constant", params=tuple(params), a=a, b=b, c=c,
        deriv_a=da, deriv_b=db, deriv_c=dc, bound_catalog=catalog,
        dim_state=dim, dim_noise=dim, c_is_constant=True,
    )


def _bounded_trig_model(params: Sequence[float], dim: int) -> CoefficientModel:
    alpha, beta, jump = params
    a, da = _sine_parts(alpha, 0.0)
    b, db = _sine_parts(beta, math.pi / 2)   # beta * cos(x)
    c, dc = _sine_parts(jump, 0.0)
    catalog = {}
    for name, amplitude in zip(COEFFICIENT_NAMES, (alpha, beta, jump)):
        for order in range(1, MAX_ORDER + 1):
            catalog[deriv_key(name, order)] = abs(amplitude)
    for name, amplitude in (("b", beta), ("c", jump)):
        for order in range(2, MAX_ORDER + 1):
            catalog[product_key(name, order)] = amplitude ** 2
    return CoefficientModel(
        name="bounded_trig", params=tuple(params), a=a, b=b, c=c,
        deriv_a=da, deriv_b=db, deriv_c=dc, bound_catalog=catalog,
        dim_state=dim, dim_noise=dim, c_is_constant=(jump == 0.0),
    )


BUILTIN_MODELS: Dict[str, Callable[[Sequence[float], int], CoefficientModel]] = {
    "linear": _linear_model,
    "constant": _constant_model,
    "bounded_trig": _bounded_trig_model,
}


def builtin_model(name: str, params: Sequence[float], dim: int = 1) -> CoefficientModel:
    """Build one of the builtin coefficient models by name."""
    params = resolve_params(MODEL_CATALOG, "model", name, list(params))
    if dim < 1:
        raise ValueError(f"State dimension must be positive, got {dim}")
    return BUILTIN_MODELS[name](params, dim)


def custom_model(name: str, a: Coefficient, b: Coefficient, c: Coefficient,
                 deriv_a: Derivative, deriv_b: Derivative, deriv_c: Derivative,
                 bound_catalog: Optional[Dict[str, float]] = None) -> CoefficientModel:
    """Wrap user-supplied coefficients; the catalog may be partial."""
    return CoefficientModel(
        name=name, params=(), a=a, b=b, c=c,
        deriv_a=deriv_a, deriv_b=deriv_b, deriv_c=deriv_c,
        bound_catalog=dict(bound_catalog or {}),
    )


def default_state_grid(seed: int = HABC_GRID_SEED) -> np.ndarray:
    """Uniform grid on [-50, 50] plus standard-normal draws."""
    rng = np.random.default_rng(seed)
    bulk = np.linspace(-HABC_GRID_HALF_WIDTH, HABC_GRID_HALF_WIDTH, HABC_GRID_POINTS)
    tails = rng.standard_normal(HABC_NORMAL_POINTS)
    return np.concatenate([bulk, tails])


def derivative_discrepancy(model: CoefficientModel, points, step: float = 1e-5) -> Dict[str, float]:
    """Max relative gap between analytic order-k derivatives and central
    differences of the order k-1 derivative, per (coefficient, order)."""
    points = np.asarray(points, dtype=float)
    gaps = {}
    for name in COEFFICIENT_NAMES:
        for order in range(1, MAX_ORDER + 1):
            analytic = model.derivative(name, points, order)
            numeric = (model.derivative(name, points + step, order - 1)
                       - model.derivative(name, points - step, order - 1)) / (2 * step)
            scale = np.maximum(np.abs(analytic), 1.0)
            gaps[deriv_key(name, order)] = float(np.max(np.abs(analytic - numeric) / scale))
    return gaps


def _clause_values(model: CoefficientModel, points: np.ndarray) -> Dict[Tuple[str, str, int], np.ndarray]:
    values = {}
    for name in COEFFICIENT_NAMES:
        for order in range(1, MAX_ORDER + 1):
            values[("derivative", name, order)] = np.abs(model.derivative(name, points, order))
    for name in ("b", "c"):
        base = model.derivative(name, points, 0)
        for order in range(2, MAX_ORDER + 1):
            values[("product", name, order)] = np.abs(base * model.derivative(name, points, order))
    return values


def _verdict(sups: List[float]) -> str:
    if not all(math.isfinite(s) for s in sups):
        return "numerically-unbounded"
    first, last = sups[0], sups[-1]
    growing = all(later >= earlier for earlier, later in zip(sups, sups[1:]))
    if growing and last > UNBOUNDED_GROWTH_FACTOR * max(first, 1e-300) and last > 1e-12:
        return "numerically-unbounded"
    return "pass"


def check_habc(model: CoefficientModel, state_grid=None) -> HypothesisReport:
    """Empirical check of the H_{a,b,c} sup-norm clauses.

    Each clause is evaluated on the state grid and on copies scaled by the
    expansion factors; a sup that keeps growing with the grid is flagged as
    numerically unbounded. Verdicts are empirical, never proofs.
    """
    grid = default_state_grid() if state_grid is None else np.asarray(state_grid, dtype=float)
    grid = grid[np.isfinite(grid)] if grid.size else grid
    degenerate = np.unique(grid).size < 2

    per_scale = []
    if not degenerate:
        with np.errstate(all="ignore"):
            for factor in HABC_GRID_EXPANSIONS:
                per_scale.append(_clause_values(model, grid * factor))

    clauses = []
    keys = [("derivative", name, order) for name in COEFFICIENT_NAMES for order in range(1, MAX_ORDER + 1)]
    keys += [("product", name, order) for name in ("b", "c") for order in range(2, MAX_ORDER + 1)]
    for kind, name, order in keys:
        catalog_key = deriv_key(name, order) if kind == "derivative" else product_key(name, order)
        label = f"||{name}^({order})||" if kind == "derivative" else f"||{name}*{name}^({order})||"
        if degenerate:
            clauses.append(HypothesisClause(clause=label, kind=kind, coefficient=name, order=order,
                                            empirical_sup=None, catalog_bound=_finite_or_none(model.bound(catalog_key)),
                                            verdict="unknown"))
            continue
        sups = [float(np.max(values[(kind, name, order)])) if values[(kind, name, order)].size else math.nan
                for values in per_scale]
        sups = [s if not math.isnan(s) else math.inf for s in sups]
        clauses.append(HypothesisClause(
            clause=label, kind=kind, coefficient=name, order=order,
            empirical_sup=sups[0] if math.isfinite(sups[0]) else None,
            catalog_bound=_finite_or_none(model.bound(catalog_key)),
            verdict=_verdict(sups),
        ))

    passed = all(clause.verdict == "pass" for clause in clauses)
    flagged = [clause.clause for clause in clauses if clause.verdict != "pass"]
    if flagged:
        logger.warning(f"H_abc check for {model.name}: clauses not passing: {flagged}")
    else:
        logger.info(f"H_abc check for {model.name}: all {len(clauses)} clauses pass")
    return HypothesisReport(model=model.name, grid_points=int(grid.size), clauses=clauses, passed=passed)


def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None
