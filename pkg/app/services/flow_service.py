"""
Marcus jump flow, one-step map psi and their variational systems
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.config import (
    DEFAULT_ODE_TOL, MIN_SUBSTEPS, SUBSTEP_FACTOR, MAX_SUBSTEPS, DEFAULT_FD_STEP, HNU_MAX_WINDOWS,
)
from app.models import BoundReport, GradientMomentClause, GradientMomentReport, PsiGrowthReport
from app.services.coefficients_service import CoefficientModel
from app.services.levy_service import LevyModel, big_jump_atoms, big_jump_window

logger = logging.getLogger(__name__)

# exponents s_k of the bare shapes |z|^(k-1) e^(s_k |c'||z|)
BARE_SHAPE_EXPONENTS = (1.0, 3.0, 5.0, 8.0)
BOUND_RELATIVE_SLACK = 1e-8
BOUND_ABSOLUTE_SLACK = 1e-12

# (derivative order, power) pairs of the big-jump gradient moments
GRADIENT_MOMENT_ORDERS = ((1, 4.0), (2, 2.0), (3, 4.0 / 3.0), (4, 1.0))
GRADIENT_TAIL_TOL = 1e-6

Field = Callable[[np.ndarray], np.ndarray]


class FlowConvergenceError(RuntimeError):
    """Raised when the step-halving loop exhausts the substep budget."""


@dataclass(frozen=True)
class FlowResult:
    """phi^z(1; x) with x-derivatives of orders 1..order."""
    value: np.ndarray
    derivs: List[np.ndarray]
    substeps_used: int
    local_error_estimate: float


@dataclass(frozen=True)
class PsiResult:
    """psi(1; x, tau, w, z) and optional first-order sensitivities."""
    value: np.ndarray
    psi_tau: Optional[np.ndarray] = None
    psi_w: Optional[np.ndarray] = None
    psi_z: Optional[np.ndarray] = None
    substeps_used: int = 0
    local_error_estimate: float = 0.0


def _rk4(field: Field, y0: np.ndarray, n_substeps: int) -> np.ndarray:
    """Classical RK4 on u in [0, 1] for the autonomous system dy/du = field(y)."""
    du = 1.0 / n_substeps
    y = y0.copy()
    for _ in range(n_substeps):
        k1 = field(y)
        k2 = field(y + 0.5 * du * k1)
        k3 = field(y + 0.5 * du * k2)
        k4 = field(y + du * k3)
        y = y + (du / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def _initial_substeps(stiffness: float) -> int:
    return max(MIN_SUBSTEPS, int(math.ceil(SUBSTEP_FACTOR * stiffness)))


def _solve_halving(field: Field, y0: np.ndarray, stiffness: float, tol: float,
                   allow_nonfinite: bool = False) -> Tuple[np.ndarray, int, float]:
    """Integrate with n and 2n substeps, doubling n until the step-halving estimate is below tol.

    Returns the Richardson-extrapolated state, the finer substep count and the
    error estimate. With allow_nonfinite, entries that blow up are left
    non-finite and excluded from the error test.
    """
    if tol <= 0:
        raise ValueError(f"Tolerance must be positive, got {tol}")
    n = _initial_substeps(stiffness)
    if n > MAX_SUBSTEPS:
        raise FlowConvergenceError(f"Initial substep count {n} exceeds budget {MAX_SUBSTEPS}")
    with np.errstate(over="ignore", invalid="ignore"):
        coarse = _rk4(field, y0, n)
        while True:
            fine = _rk4(field, y0, 2 * n)
            delta = np.abs(fine - coarse) / 15.0
            finite = np.isfinite(fine) & np.isfinite(coarse)
            if not allow_nonfinite and not np.all(finite):
                raise FlowConvergenceError("Flow integration produced non-finite values")
            scale = np.maximum(1.0, np.abs(fine))
            excess = np.where(finite, delta - tol * scale, -1.0)
            error = float(np.max(np.where(finite, delta, 0.0), initial=0.0))
            if np.all(excess <= 0.0):
                logger.debug(f"Flow settled with {2 * n} substeps, error estimate {error:.3g}")
                return fine + (fine - coarse) / 15.0, 2 * n, error
            n *= 2
            if 2 * n > MAX_SUBSTEPS:
                raise FlowConvergenceError(
                    f"No convergence within {MAX_SUBSTEPS} substeps (error estimate {error:.3g}, tol {tol:.3g})"
                )
            coarse = fine


def _flow_field(model: CoefficientModel, z: np.ndarray, order: int) -> Field:
    """du phi = c(phi) z with the chained variational equations up to the given order."""

    def field(y):
        phi = y[0]
        dc = [model.derivative("c", phi, k) for k in range(order + 1)]
        out = np.empty_like(y)
        out[0] = z * dc[0]
        if order >= 1:
            out[1] = z * dc[1] * y[1]
        if order >= 2:
            out[2] = z * (dc[2] * y[1] ** 2 + dc[1] * y[2])
        if order >= 3:
            out[3] = z * (dc[3] * y[1] ** 3 + 3.0 * dc[2] * y[1] * y[2] + dc[1] * y[3])
        if order >= 4:
            out[4] = z * (dc[4] * y[1] ** 4 + 6.0 * dc[3] * y[1] ** 2 * y[2]
                          + 3.0 * dc[2] * y[2] ** 2 + 4.0 * dc[2] * y[1] * y[3] + dc[1] * y[4])
        return out

    return field


def _unwrap(arr: np.ndarray, scalar: bool):
    return float(arr) if scalar else arr


def solve_flow(model: CoefficientModel, x, z, order: int = 0, tol: float = DEFAULT_ODE_TOL,
               allow_nonfinite: bool = False) -> FlowResult:
    """Time-1 map of du phi = c(phi) z from x, with x-derivatives up to order 4.

    x and z broadcast against each other; scalar inputs give float outputs.
    """
    if not 0 <= order <= 4:
        raise ValueError(f"Flow derivative order must be in 0..4, got {order}")
    scalar = np.ndim(x) == 0 and np.ndim(z) == 0
    x_arr, z_arr = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(z, dtype=float))
    y0 = np.zeros((order + 1,) + x_arr.shape)
    y0[0] = x_arr
    if order >= 1:
        y0[1] = 1.0

    if not np.any(z_arr):
        y, substeps, error = y0, 0, 0.0
    else:
        stiffness = model.lipschitz_bounds()[2] * float(np.max(np.abs(z_arr)))
        y, substeps, error = _solve_halving(_flow_field(model, z_arr, order), y0, stiffness, tol, allow_nonfinite)
        identity = z_arr == 0.0
        if np.any(identity):
            y = np.where(identity, y0, y)

    return FlowResult(
        value=_unwrap(y[0], scalar),
        derivs=[_unwrap(y[k], scalar) for k in range(1, order + 1)],
        substeps_used=substeps,
        local_error_estimate=error,
    )


def _psi_field(model: CoefficientModel, tau, w, z, sensitivities: bool) -> Field:
    """du psi = a(psi) tau + b(psi) w + c(psi) z, plus the linearized equations for d/dtau, d/dw, d/dz."""

    def field(y):
        psi = y[0]
        a, b, c = model.a(psi), model.b(psi), model.c(psi)
        out = np.empty_like(y)
        out[0] = a * tau + b * w + c * z
        if sensitivities:
            slope = model.deriv_a(psi, 1) * tau + model.deriv_b(psi, 1) * w + model.deriv_c(psi, 1) * z
            out[1] = slope * y[1] + a
            out[2] = slope * y[2] + b
            out[3] = slope * y[3] + c
        return out

    return field


def _psi_stiffness(model: CoefficientModel, tau, w, z) -> float:
    la, lb, lc = model.lipschitz_bounds()
    return float(np.max(la * np.abs(tau) + lb * np.abs(w) + lc * np.abs(z), initial=0.0))


def integrate_psi(model: CoefficientModel, x, tau, w, z, n_substeps: int) -> np.ndarray:
    """psi with a fixed substep count (Richardson on n and 2n), any sign of tau.

    Used by finite-difference stencils, which need one discretization for all
    stencil points.
    """
    x_arr, tau_arr, w_arr, z_arr = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, tau, w, z)))
    y0 = x_arr[None, ...].copy()
    field = _psi_field(model, tau_arr, w_arr, z_arr, sensitivities=False)
    coarse = _rk4(field, y0, n_substeps)
    fine = _rk4(field, y0, 2 * n_substeps)
    return (fine + (fine - coarse) / 15.0)[0]


def psi_substeps(model: CoefficientModel, x, tau, w, z, tol: float = DEFAULT_ODE_TOL) -> int:
    """Substep count at which the step-halving test passes for all given points."""
    x_arr, tau_arr, w_arr, z_arr = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, tau, w, z)))
    field = _psi_field(model, tau_arr, w_arr, z_arr, sensitivities=False)
    _, substeps, _ = _solve_halving(field, x_arr[None, ...].copy(), _psi_stiffness(model, tau_arr, w_arr, z_arr), tol)
    return substeps // 2


def solve_psi(model: CoefficientModel, x, tau, w, z, tol: float = DEFAULT_ODE_TOL,
              sensitivities: bool = False, allow_nonfinite: bool = False) -> PsiResult:
    """One-step map psi(x; tau, w, z), the time-1 map of the combined field."""
    if np.any(np.asarray(tau) < 0):
        raise ValueError("tau must be non-negative")
    scalar = all(np.ndim(v) == 0 for v in (x, tau, w, z))
    x_arr, tau_arr, w_arr, z_arr = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, tau, w, z)))
    n_rows = 4 if sensitivities else 1
    y0 = np.zeros((n_rows,) + x_arr.shape)
    y0[0] = x_arr

    if not (np.any(tau_arr) or np.any(w_arr) or np.any(z_arr)):
        y, substeps, error = y0, 0, 0.0
        if sensitivities:
            # at zero increments the field vanishes and psi_tau, psi_w, psi_z are a, b, c at x
            y[1], y[2], y[3] = model.a(x_arr), model.b(x_arr), model.c(x_arr)
    else:
        field = _psi_field(model, tau_arr, w_arr, z_arr, sensitivities)
        y, substeps, error = _solve_halving(field, y0, _psi_stiffness(model, tau_arr, w_arr, z_arr), tol, allow_nonfinite)

    extra = {}
    if sensitivities:
        extra = {"psi_tau": _unwrap(y[1], scalar), "psi_w": _unwrap(y[2], scalar), "psi_z": _unwrap(y[3], scalar)}
    return PsiResult(value=_unwrap(y[0], scalar), substeps_used=substeps, local_error_estimate=error, **extra)


def flow_remainder(model: CoefficientModel, x, z, u=1.0, tol: float = DEFAULT_ODE_TOL):
    """phi^z(u; x) - x - c(x) z u, using phi^z(u; x) = phi^{zu}(1; x)."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(np.abs(z) > 1.0):
        raise ValueError("flow_remainder is defined for |z| <= 1")
    if np.any((u < 0) | (u > 1)):
        raise ValueError("u must lie in [0, 1]")
    value = solve_flow(model, x, z * u, order=0, tol=tol).value
    remainder = np.asarray(value) - np.asarray(x, dtype=float) - model.c(np.asarray(x, dtype=float)) * z * u
    return float(remainder) if np.ndim(remainder) == 0 else remainder


def marcus_jump_size(model: CoefficientModel, x, z, tol: float = DEFAULT_ODE_TOL):
    """State change phi^z(x) - x caused by a jump z under the Marcus rule."""
    value = solve_flow(model, x, z, order=0, tol=tol).value
    return np.asarray(value) - np.asarray(x, dtype=float)


def ito_jump_size(model: CoefficientModel, x, z):
    """State change c(x) z of the same jump under the Ito rule."""
    return model.c(np.asarray(x, dtype=float)) * np.asarray(z, dtype=float)


def derivative_envelope(model: CoefficientModel, z) -> np.ndarray:
    """Gronwall envelope B_k(z), k = 1..4, for |d^k phi^z / dx^k| built from the catalog bounds."""
    absz = np.abs(np.asarray(z, dtype=float))
    lip = model.c_prime_bound * absz
    k2, k3, k4 = (model.bound(f"c{order}") for order in (2, 3, 4))
    b1 = np.exp(lip)
    b2 = k2 * absz * np.exp(3 * lip)
    b3 = k3 * absz * np.exp(4 * lip) + 3 * k2 ** 2 * absz ** 2 * np.exp(5 * lip)
    b4 = absz * np.exp(lip) * (k4 * np.exp(4 * lip) + 6 * k3 * np.exp(2 * lip) * b2
                               + 3 * k2 * b2 ** 2 + 4 * k2 * np.exp(lip) * b3)
    return np.stack([b1, b2, b3, b4])


def assert_appendix_bounds(model: CoefficientModel, sample: Sequence[Tuple[float, float]],
                           tol: float = DEFAULT_ODE_TOL) -> BoundReport:
    """Compare |d^k phi^z/dx^k| against the derivative envelope at each (x, z).

    Also records empirical constants against the bare shapes
    |z|^(k-1) e^(s_k |c'||z|) and checks the small-jump remainder bound
    |phi(u;x,z)| <= z^2 |c'| |c(x)| e^{|c'|} on the samples with |z| <= 1.
    """
    if not math.isfinite(model.c_prime_bound):
        raise ValueError(f"Model {model.name} has no recorded bound for |c'|")
    pairs = np.asarray(sample, dtype=float).reshape(-1, 2)
    xs, zs = pairs[:, 0], pairs[:, 1]
    if xs.size == 0:
        return BoundReport(model=model.name, n_samples=0, violations=[0] * 4, max_ratio=[0.0] * 4,
                           empirical_constants=[0.0] * 4, passed=True)

    flow = solve_flow(model, xs, zs, order=4, tol=tol)
    magnitudes = np.abs(np.stack(flow.derivs))
    envelope = derivative_envelope(model, zs)
    allowed = envelope * (1.0 + BOUND_RELATIVE_SLACK) + BOUND_ABSOLUTE_SLACK
    violations = [int(np.sum(magnitudes[k] > allowed[k])) for k in range(4)]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(envelope > 0, magnitudes / envelope, np.where(magnitudes > BOUND_ABSOLUTE_SLACK, np.inf, 0.0))

        absz = np.abs(zs)
        lip = model.c_prime_bound * absz
        constants = []
        for k in range(4):
            shape = absz ** k * np.exp(BARE_SHAPE_EXPONENTS[k] * lip)
            usable = shape > 0
            constants.append(float(np.max(magnitudes[k][usable] / shape[usable], initial=0.0)))

    small = absz <= 1.0
    remainder_violations, remainder_constant = 0, None
    if np.any(small):
        rem = np.abs(flow_remainder(model, xs[small], zs[small], 1.0, tol=tol))
        cx = np.abs(model.c(xs[small]))
        limit = zs[small] ** 2 * model.c_prime_bound * cx * math.exp(model.c_prime_bound)
        remainder_violations = int(np.sum(rem > limit * (1.0 + BOUND_RELATIVE_SLACK) + BOUND_ABSOLUTE_SLACK))
        scale = zs[small] ** 2 * cx
        nonzero = scale > 0
        remainder_constant = float(np.max(rem[nonzero] / scale[nonzero], initial=0.0))

    passed = sum(violations) == 0 and remainder_violations == 0
    if passed:
        logger.info(f"Flow derivative bounds hold for {model.name} on {xs.size} samples")
    else:
        logger.warning(f"Flow derivative bound violations for {model.name}: {violations}, remainder {remainder_violations}")
    return BoundReport(
        model=model.name,
        n_samples=int(xs.size),
        violations=violations,
        max_ratio=[float(np.max(ratio[k])) for k in range(4)],
        empirical_constants=constants,
        remainder_samples=int(np.sum(small)),
        remainder_violations=remainder_violations,
        remainder_constant=remainder_constant,
        passed=passed,
    )


def check_psi_growth(model: CoefficientModel, sample: Sequence[Tuple[float, float, float, float]],
                     fd_step: float = DEFAULT_FD_STEP, tol: float = DEFAULT_ODE_TOL) -> PsiGrowthReport:
    """Spot check of psi_tau, psi_w, psi_z against C (1+|x|) e^{2(|a'|tau + |b'||w| + |c'||z|)}.

    Sensitivities come from the linearized equations and are cross-checked
    by central differences of psi; the reported constants are empirical.
    """
    points = np.asarray(sample, dtype=float).reshape(-1, 4)
    x, tau, w, z = points.T
    result = solve_psi(model, x, tau, w, z, tol=tol, sensitivities=True)
    n = psi_substeps(model, x, tau + fd_step, np.abs(w) + fd_step, np.abs(z) + fd_step, tol=tol)

    def central(dt, dw, dz):
        plus = integrate_psi(model, x, tau + dt, w + dw, z + dz, n)
        minus = integrate_psi(model, x, tau - dt, w - dw, z - dz, n)
        return (plus - minus) / (2.0 * fd_step)

    fd = {
        "psi_tau": central(fd_step, 0.0, 0.0),
        "psi_w": central(0.0, fd_step, 0.0),
        "psi_z": central(0.0, 0.0, fd_step),
    }
    la, lb, lc = model.lipschitz_bounds()
    shape = (1.0 + np.abs(x)) * np.exp(2.0 * (la * tau + lb * np.abs(w) + lc * np.abs(z)))
    constants, discrepancy = {}, 0.0
    for name in ("psi_tau", "psi_w", "psi_z"):
        analytic = np.asarray(getattr(result, name))
        constants[name] = float(np.max(np.abs(analytic) / shape, initial=0.0))
        gap = np.abs(analytic - fd[name]) / np.maximum(1.0, np.abs(analytic))
        discrepancy = max(discrepancy, float(np.max(gap, initial=0.0)))
    passed = all(math.isfinite(v) for v in constants.values()) and discrepancy <= 1e-5
    logger.info(f"psi growth constants for {model.name}: {constants}, fd gap {discrepancy:.3g}")
    return PsiGrowthReport(model=model.name, n_samples=int(x.size), constants=constants,
                           fd_discrepancy=discrepancy, passed=passed)


def check_h_grad_phi_nu(model: CoefficientModel, levy: LevyModel, states: Sequence[float],
                        tol: float = DEFAULT_ODE_TOL) -> GradientMomentReport:
    """Empirical int_{|z|>1} |d^k phi^z(x)/dx^k|^{p_k} nu(dz) at the given states.

    (k, p_k) runs over (1, 4), (2, 2), (3, 4/3), (4, 1); each value is the max
    over the states. Densities are integrated over doubling windows; a clause
    whose flows leave the substep budget before its tail settles is
    inconclusive.
    """
    xs = np.asarray(states, dtype=float).ravel()
    if xs.size == 0 or not np.all(np.isfinite(xs)):
        raise ValueError("Sample states must be finite and non-empty")
    powers = np.array([p for _, p in GRADIENT_MOMENT_ORDERS])

    def contribution(nodes, weights):
        flow = solve_flow(model, xs[:, None], nodes[None, :], order=4, tol=tol)
        magnitudes = np.abs(np.stack(flow.derivs)) ** powers[:, None, None]
        return magnitudes @ weights

    totals = np.zeros((len(GRADIENT_MOMENT_ORDERS), xs.size))
    verdicts: List[Optional[str]] = [None] * len(GRADIENT_MOMENT_ORDERS)
    positions, masses = big_jump_atoms(levy)
    if positions.size:
        totals += contribution(positions, masses)

    if levy.has_density and levy.big_jump_intensity > 0:
        base_mass = levy.big_jump_intensity
        previous = np.full(len(verdicts), math.inf)
        growing = np.zeros(len(verdicts), dtype=int)
        for j in range(HNU_MAX_WINDOWS):
            nodes, weights = big_jump_window(levy, j)
            try:
                window = contribution(nodes, weights)
            except FlowConvergenceError as e:
                logger.warning(f"Gradient moment window {j} for {model.name}/{levy.family}: {e}")
                break
            totals += window
            peak, total = window.max(axis=1), totals.max(axis=1)
            growing = np.where(peak > previous, growing + 1, 0)
            tail_small = levy.mass_outside(2.0 ** (j + 1)) <= GRADIENT_TAIL_TOL * base_mass
            for k in range(len(verdicts)):
                if verdicts[k] is not None:
                    continue
                if not math.isfinite(total[k]) or (j >= 8 and growing[k] >= 3):
                    verdicts[k] = "infinite"
                elif tail_small and peak[k] <= GRADIENT_TAIL_TOL * total[k] and peak[k] <= previous[k]:
                    verdicts[k] = "finite"
            if all(v is not None for v in verdicts):
                break
            previous = peak
        verdicts = [v or "inconclusive" for v in verdicts]
    else:
        verdicts = ["finite"] * len(verdicts)

    clauses = [
        GradientMomentClause(order=k, power=p,
                             value=float(totals[i].max()) if verdicts[i] != "infinite" else None,
                             verdict=verdicts[i])
        for i, (k, p) in enumerate(GRADIENT_MOMENT_ORDERS)
    ]
    passed = all(clause.verdict != "infinite" for clause in clauses)
    logger.info(f"Gradient moment check for {model.name}/{levy.family}: {[c.verdict for c in clauses]}")
    return GradientMomentReport(family=levy.family, model=model.name, states=xs.tolist(),
                                clauses=clauses, passed=passed)
