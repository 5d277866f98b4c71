"""
Generators of the small-jump Marcus process and of the lifted driving process,
and the identity check between them
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Sequence, Tuple

import numpy as np
from numpy.polynomial import hermite_e

from app.config import TEST_FUNCTION_CATALOG, DEFAULT_FD_STEP, DEFAULT_IDENTITY_TOL, resolve_params
from app.models import IdentityReport
from app.services.coefficients_service import CoefficientModel
from app.services.flow_service import integrate_psi, psi_substeps
from app.services.integrator_service import EffectiveDrift

logger = logging.getLogger(__name__)

Scalar = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TestFunction:
    """f with analytic derivatives f', f'', f''', f''''."""
    __test__ = False  # not a pytest class

    tag: str
    params: Tuple[float, ...]
    f: Scalar
    derivs: Tuple[Scalar, Scalar, Scalar, Scalar]

    def __call__(self, x) -> np.ndarray:
        return self.f(np.asarray(x, dtype=float))

    def derivative(self, x, order: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if order == 0:
            return self.f(x)
        if not 1 <= order <= 4:
            raise ValueError(f"Derivative order must be in 0..4, got {order}")
        return self.derivs[order - 1](x)

    @property
    def bounded(self) -> bool:
        """C^4_b membership."""
        return self.tag != "identity"


def _gaussian_bump(center: float, width: float) -> TestFunction:
    if width <= 0:
        raise ValueError(f"gaussian_bump needs width > 0, got {width}")

    def nth(order):
        # d^k/dx^k e^{-u^2/2} = (-1/width)^k He_k(u) e^{-u^2/2}, u = (x - center)/width
        coef = np.zeros(order + 1)
        coef[order] = 1.0

        def value(x):
            u = (x - center) / width
            return (-1.0 / width) ** order * hermite_e.hermeval(u, coef) * np.exp(-0.5 * u ** 2)
        return value

    return TestFunction("gaussian_bump", (center, width), nth(0), tuple(nth(k) for k in range(1, 5)))


def _cosine(freq: float, phase: float) -> TestFunction:
    def nth(order):
        def value(x):
            return freq ** order * np.cos(freq * x + phase + order * math.pi / 2)
        return value

    return TestFunction("cosine", (freq, phase), nth(0), tuple(nth(k) for k in range(1, 5)))


def _poly_truncated(scale: float) -> TestFunction:
    if scale <= 0:
        raise ValueError(f"poly_truncated needs scale > 0, got {scale}")

    def t(x):
        return np.tanh(x / scale)

    derivs = (
        lambda x: 1.0 - t(x) ** 2,
        lambda x: -2.0 * t(x) * (1.0 - t(x) ** 2) / scale,
        lambda x: -2.0 * (1.0 - t(x) ** 2) * (1.0 - 3.0 * t(x) ** 2) / scale ** 2,
        lambda x: 8.0 * t(x) * (2.0 - 3.0 * t(x) ** 2) * (1.0 - t(x) ** 2) / scale ** 3,
    )
    return TestFunction("poly_truncated", (scale,), lambda x: scale * t(x), derivs)


def _identity() -> TestFunction:
    zero = np.zeros_like
    return TestFunction("identity", (), lambda x: np.asarray(x, dtype=float),
                        (np.ones_like, zero, zero, zero))


def test_function(tag: str, params: Sequence[float] = ()) -> TestFunction:
    """Build a test function by tag."""
    resolved = resolve_params(TEST_FUNCTION_CATALOG, "test function", tag, list(params))
    if tag == "gaussian_bump":
        return _gaussian_bump(*resolved)
    if tag == "cosine":
        return _cosine(*resolved)
    if tag == "poly_truncated":
        return _poly_truncated(*resolved)
    return _identity()


test_function.__test__ = False


def combine(alpha: float, f: TestFunction, beta: float, g: TestFunction) -> TestFunction:
    """alpha f + beta g with derivatives."""
    derivs = tuple((lambda x, k=k: alpha * f.derivs[k](x) + beta * g.derivs[k](x)) for k in range(4))
    return TestFunction(f"{f.tag}+{g.tag}", f.params + g.params, lambda x: alpha * f(x) + beta * g(x), derivs)


def apply_L_tilde(model: CoefficientModel, ed: EffectiveDrift, f: TestFunction, x) -> np.ndarray:
    """L~f(x) = a-ring f' + b^2 f''/2 + int_{|z|<=1} (f(phi^z(x)) - f(x) - f'(x) c(x) z) nu(dz)."""
    x = np.asarray(x, dtype=float)
    f1, f2 = f.derivative(x, 1), f.derivative(x, 2)
    drift = model.a(x) + model.stratonovich_correction(x)
    value = drift * f1 + 0.5 * model.b(x) ** 2 * f2

    quad = ed.quadrature
    if quad.size:
        cx = model.c(x)
        flows = ed.flows_at_nodes(x)
        integrand = f(flows) - f(x)[..., None] - (f1 * cx)[..., None] * quad.nodes
        value = value + quad.integrate(integrand)
    if quad.second_moment_below:
        cx = model.c(x)
        value = value + 0.5 * (cx * model.deriv_c(x, 1) * f1 + cx ** 2 * f2) * quad.second_moment_below
    return value


def _richardson(d_coarse: np.ndarray, d_fine: np.ndarray) -> np.ndarray:
    return (4.0 * d_fine - d_coarse) / 3.0


def apply_Q(model: CoefficientModel, ed: EffectiveDrift, f: TestFunction, x, tau: float, w: float, z: float,
            fd_step: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Qg = g_tau + g_ww/2 + int_{|xi|<=1} (g(z+xi) - g(z) - g_z xi) nu(dxi) for g = f o psi(x; .,.,.).

    Derivatives of g are central differences at steps fd_step and fd_step/2
    with Richardson refinement; every psi evaluation shares one substep count.
    """
    if fd_step <= 0:
        raise ValueError(f"fd_step must be positive, got {fd_step}")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    x = np.asarray(x, dtype=float)
    quad = ed.quadrature
    reach = fd_step + (float(np.max(np.abs(quad.nodes))) if quad.size else 0.0)
    n = psi_substeps(model, x, tau + fd_step, abs(w) + fd_step, abs(z) + reach, tol=ed.tol)

    def g(dt=0.0, dw=0.0, dz=0.0):
        return f(integrate_psi(model, x, tau + dt, w + dw, z + dz, n))

    center = g()
    first_t, first_z, second_w, second_z = [], [], [], []
    for step in (fd_step, fd_step / 2):
        first_t.append((g(dt=step) - g(dt=-step)) / (2 * step))
        first_z.append((g(dz=step) - g(dz=-step)) / (2 * step))
        second_w.append((g(dw=step) - 2 * center + g(dw=-step)) / step ** 2)
        second_z.append((g(dz=step) - 2 * center + g(dz=-step)) / step ** 2)
    g_tau = _richardson(*first_t)
    g_z = _richardson(*first_z)
    g_ww = _richardson(*second_w)
    g_zz = _richardson(*second_z)

    value = g_tau + 0.5 * g_ww
    if quad.size:
        shifted = f(integrate_psi(model, x[..., None], tau, w, z + quad.nodes, n))
        integrand = shifted - center[..., None] - g_z[..., None] * quad.nodes
        value = value + quad.integrate(integrand)
    if quad.second_moment_below:
        value = value + 0.5 * g_zz * quad.second_moment_below
    return value


def verify_L_equals_Q(model: CoefficientModel, ed: EffectiveDrift, f: TestFunction, states: Sequence[float],
                      tol: float = DEFAULT_IDENTITY_TOL, fd_step: float = DEFAULT_FD_STEP) -> IdentityReport:
    """max |L~f(x) - Qf(psi(x;0,0,0))| over the states; pass iff <= tol."""
    states = np.asarray(states, dtype=float)
    if not np.all(np.isfinite(states)):
        raise ValueError("States must be finite")
    lhs = apply_L_tilde(model, ed, f, states)
    rhs = apply_Q(model, ed, f, states, 0.0, 0.0, 0.0, fd_step=fd_step)
    gap = np.abs(np.asarray(lhs) - np.asarray(rhs))
    worst = int(np.argmax(gap)) if gap.size else 0
    max_gap = float(gap.max()) if gap.size else 0.0
    passed = max_gap <= tol
    log = logger.info if passed else logger.warning
    log(f"Generator identity for {model.name}/{f.tag}: max discrepancy {max_gap:.3g} (tol {tol:.1g})")
    return IdentityReport(
        model=model.name, test_function=f.tag, n_states=int(states.size), max_discrepancy=max_gap,
        worst_state=float(states[worst]) if gap.size else None, tol=tol, passed=passed,
    )


def generator_growth(model: CoefficientModel, ed: EffectiveDrift, f: TestFunction,
                     xs: Sequence[float]) -> Dict[str, float]:
    """Empirical sup of |L~f(x)| / (1 + x^2) and the same normalized by |f'| + |f''| sup-norms."""
    xs = np.asarray(xs, dtype=float)
    ratio = np.abs(apply_L_tilde(model, ed, f, xs)) / (1.0 + xs ** 2)
    norm = float(np.max(np.abs(f.derivative(xs, 1))) + np.max(np.abs(f.derivative(xs, 2))))
    bound = float(np.max(ratio))
    return {"sup_ratio": bound, "constant": bound / norm if norm > 0 else 0.0}
