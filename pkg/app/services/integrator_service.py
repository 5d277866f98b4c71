"""
Path integrators: Wong-Zakai scheme, jump-adapted reference, exact linear
oracle and the effective drift of the small-jump process
"""

import logging
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from app.config import DEFAULT_ODE_TOL, MC_ODE_TOL, MAX_STEPS, HNU_MAX_WINDOWS
from app.services.coefficients_service import CoefficientModel, builtin_model
from app.services.flow_service import solve_flow, solve_psi
from app.services.levy_service import (
    IncrementStream, LevyModel, PathNoise, QuadratureError, SmallJumpQuadrature,
    big_jump_atoms, big_jump_window, grid_steps, small_jump_quadrature,
)

logger = logging.getLogger(__name__)

SCHEME_TAGS = ("wong_zakai", "ito_reference", "exact_linear", "small_jump_only")
BIG_JUMP_MASS_TOL = 1e-10


def _step_count(T: float, h: float) -> int:
    steps = grid_steps(T, h)
    if steps > MAX_STEPS:
        raise ValueError(f"T/h = {steps} exceeds {MAX_STEPS} steps")
    return steps


@dataclass(frozen=True)
class PathGrid:
    """Trajectory on the grid k*h with the increments that drove it."""
    h: float
    times: np.ndarray
    states: np.ndarray
    stream_ref: Tuple[int, int]
    scheme_tag: str
    dw: Optional[np.ndarray] = None
    dz: Optional[np.ndarray] = None


@dataclass(frozen=True)
class NoiseBatch:
    """Noise of consecutive paths on a shared base grid; jumps are stored flat, sorted by (path, time).

    For a diagonal model of dimension dim every path owns dim stream rows:
    coordinate i of path p is driven by stream p * dim + i, so the coordinates
    see independent Brownian motions and jump processes.
    """
    seed: int
    path_indices: np.ndarray
    T: float
    base_step: float
    dw: np.ndarray
    jump_path: np.ndarray
    jump_time: np.ndarray
    jump_size: np.ndarray
    jump_normal: np.ndarray
    compensator: float
    dim: int = 1

    @classmethod
    def from_path_noise(cls, noises: List[PathNoise], dim: int = 1) -> "NoiseBatch":
        if len(noises) % dim:
            raise ValueError(f"{len(noises)} stream rows do not split into paths of dimension {dim}")
        first = noises[0]
        counts = [noise.jump_times.size for noise in noises]
        return cls(
            seed=first.seed,
            path_indices=np.array([noise.path_index for noise in noises[::dim]], dtype=np.int64) // dim,
            T=first.T,
            base_step=first.base_step,
            dw=np.stack([noise.dw for noise in noises]),
            jump_path=np.repeat(np.arange(len(noises)), counts),
            jump_time=np.concatenate([noise.jump_times for noise in noises]),
            jump_size=np.concatenate([noise.jump_sizes for noise in noises]),
            jump_normal=np.concatenate([noise.bridge_normals for noise in noises]),
            compensator=first.compensator,
            dim=dim,
        )

    @classmethod
    def generate(cls, levy: LevyModel, seed: int, path_indices: Iterable[int], T: float,
                 base_step: float, dim: int = 1) -> "NoiseBatch":
        """Draw the noise of each path (and each coordinate) from its own keyed stream."""
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        noises = [IncrementStream(seed, int(i) * dim + coord).path_noise(levy, T, base_step)
                  for i in path_indices for coord in range(dim)]
        if not noises:
            raise ValueError("A noise batch needs at least one path")
        return cls.from_path_noise(noises, dim)

    @property
    def n_rows(self) -> int:
        """Stream rows, n_paths * dim."""
        return int(self.dw.shape[0])

    @property
    def n_paths(self) -> int:
        return self.n_rows // self.dim

    @property
    def n_base(self) -> int:
        return int(self.dw.shape[1])

    def flat_states(self, x0) -> np.ndarray:
        """Initial state of every stream row; x0 is a scalar or one value per coordinate."""
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        if x0.size not in (1, self.dim):
            raise ValueError(f"x0 needs 1 or {self.dim} values, got {x0.size}")
        return np.broadcast_to(x0, (self.n_paths, self.dim)).reshape(-1).copy()

    def by_path(self, values: np.ndarray) -> np.ndarray:
        """Stream rows regrouped as (n_paths, dim, ...); scalar batches are returned as they are."""
        if self.dim == 1:
            return values
        return values.reshape((self.n_paths, self.dim) + values.shape[1:])

    def ratio(self, h: float) -> int:
        """Base steps per step of size h."""
        ratio = h / self.base_step
        m = int(round(ratio))
        if m < 1 or abs(ratio - m) > 1e-9 * ratio:
            raise ValueError(f"h={h} is not a multiple of the base step {self.base_step}")
        if self.n_base % m:
            raise ValueError(f"T={self.T} is not a multiple of h={h}")
        return m

    def jump_buckets(self, h: float) -> np.ndarray:
        """Index of the step of size h containing each jump, consistent across resolutions."""
        m = self.ratio(h)
        base = np.minimum(np.floor(self.jump_time / self.base_step).astype(np.int64), self.n_base - 1)
        return base // m

    def increments(self, h: float) -> Tuple[np.ndarray, np.ndarray]:
        """(dW, dZ) per step of size h, shape (n_rows, T/h)."""
        m = self.ratio(h)
        steps = self.n_base // m
        dw = self.dw.reshape(self.n_rows, steps, m).sum(axis=2)
        dz = np.zeros((self.n_rows, steps))
        np.add.at(dz, (self.jump_path, self.jump_buckets(h)), self.jump_size)
        dz -= self.compensator * h
        return dw, dz

    def cumulative(self, h: float) -> Tuple[np.ndarray, np.ndarray]:
        """(W, Z) at the grid points k*h, shape (n_rows, T/h + 1)."""
        dw, dz = self.increments(h)
        zeros = np.zeros((self.n_rows, 1))
        return np.hstack([zeros, np.cumsum(dw, axis=1)]), np.hstack([zeros, np.cumsum(dz, axis=1)])

    def without_big_jumps(self) -> "NoiseBatch":
        """Same noise with the jumps |z| > 1 removed (drives the small-jump process)."""
        keep = np.abs(self.jump_size) <= 1.0
        return replace(self, jump_path=self.jump_path[keep], jump_time=self.jump_time[keep],
                       jump_size=self.jump_size[keep], jump_normal=self.jump_normal[keep])

    def select(self, paths: np.ndarray) -> "NoiseBatch":
        """Sub-batch of the given path positions with all their coordinates."""
        paths = np.asarray(paths, dtype=np.int64)
        rows = (paths[:, None] * self.dim + np.arange(self.dim)).ravel()
        remap = -np.ones(self.n_rows, dtype=np.int64)
        remap[rows] = np.arange(rows.size)
        keep = remap[self.jump_path] >= 0
        return replace(self, path_indices=self.path_indices[paths], dw=self.dw[rows],
                       jump_path=remap[self.jump_path[keep]], jump_time=self.jump_time[keep],
                       jump_size=self.jump_size[keep], jump_normal=self.jump_normal[keep])


# ---------------------------------------------------------------------------
# Wong-Zakai scheme
# ---------------------------------------------------------------------------

def wz_step(model: CoefficientModel, x, h: float, dW, dZ, tol: float = MC_ODE_TOL,
            allow_nonfinite: bool = False):
    """One Wong-Zakai step: psi(x; h, dW, dZ)."""
    if h <= 0:
        raise ValueError(f"Step must be positive, got {h}")
    return solve_psi(model, x, h, dW, dZ, tol=tol, allow_nonfinite=allow_nonfinite).value


def _check_dim(model: CoefficientModel, noise: NoiseBatch) -> None:
    if model.dim_state != noise.dim:
        raise ValueError(f"Model dimension {model.dim_state} does not match the noise batch dimension {noise.dim}")


def simulate_wz_batch(model: CoefficientModel, noise: NoiseBatch, x0, h: float,
                      tol: float = MC_ODE_TOL, record: bool = False) -> np.ndarray:
    """Run the scheme on every path of the batch; final states, or all grid states when record.

    Diagonal models step every coordinate with its own increments and give
    (n_paths, dim) final states, (n_paths, dim, T/h + 1) when recording.
    """
    _check_dim(model, noise)
    dw, dz = noise.increments(h)
    steps = dw.shape[1]
    x = noise.flat_states(x0)
    states = [x] if record else None
    for k in range(steps):
        x = np.asarray(wz_step(model, x, h, dw[:, k], dz[:, k], tol=tol, allow_nonfinite=True))
        if record:
            states.append(x)
    return noise.by_path(np.stack(states, axis=1) if record else x)


def wz_dense_output(model: CoefficientModel, noise: NoiseBatch, states: np.ndarray, h: float,
                    points_per_step: int, tol: float = MC_ODE_TOL) -> Tuple[np.ndarray, np.ndarray]:
    """Continuous-time scheme between knots: psi(X_kh; t - kh, W_t - W_kh, Z_t - Z_kh).

    states holds the knots as returned by simulate_wz_batch with record; returns
    the refined times and states with points_per_step points per step.
    """
    if points_per_step < 1:
        raise ValueError(f"points_per_step must be positive, got {points_per_step}")
    states = states.reshape(noise.n_rows, -1)
    fine = h / points_per_step
    w, z = noise.cumulative(fine)
    steps = states.shape[1] - 1
    times = np.arange(steps * points_per_step + 1) * fine
    dense = np.empty((noise.n_rows, times.size))
    dense[:, ::points_per_step] = states
    for k in range(steps):
        knot = states[:, k]
        base = k * points_per_step
        for j in range(1, points_per_step):
            idx = base + j
            dense[:, idx] = solve_psi(model, knot, j * fine, w[:, idx] - w[:, base], z[:, idx] - z[:, base],
                                      tol=tol, allow_nonfinite=True).value
    return times, noise.by_path(dense)


# ---------------------------------------------------------------------------
# Jump-adapted reference integrator
# ---------------------------------------------------------------------------

def _between_jumps_drift(model: CoefficientModel, compensator: float):
    def drift(x):
        return model.a(x) + model.stratonovich_correction(x) - compensator * model.c(x)
    return drift


def simulate_reference_batch(model: CoefficientModel, noise: NoiseBatch, x0, h_ref: float,
                             tol: float = MC_ODE_TOL, record: bool = False) -> np.ndarray:
    """Euler-Maruyama on the Ito form between jumps, exact Marcus flow at every jump time.

    Inside a step that contains jumps, the Brownian increment is split at the
    jump times by Brownian-bridge draws; between jumps the drift is
    a + b'b/2 - c m_delta. Output shapes follow simulate_wz_batch.
    """
    _check_dim(model, noise)
    dw, _ = noise.increments(h_ref)
    steps = dw.shape[1]
    drift = _between_jumps_drift(model, noise.compensator)

    buckets = noise.jump_buckets(h_ref)
    order = np.lexsort((noise.jump_time, noise.jump_path, buckets))
    j_bucket = buckets[order]
    j_path = noise.jump_path[order]
    j_time = noise.jump_time[order]
    j_size = noise.jump_size[order]
    j_normal = noise.jump_normal[order]
    starts = np.searchsorted(j_bucket, np.arange(steps + 1))

    x = noise.flat_states(x0)
    states = [x] if record else None
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            x_old = x
            x = x_old + drift(x_old) * h_ref + model.b(x_old) * dw[:, k]
            lo, hi = starts[k], starts[k + 1]
            if hi > lo:
                paths = j_path[lo:hi]
                affected, first = np.unique(paths, return_index=True)
                rank = np.arange(hi - lo) - np.repeat(first, np.diff(np.append(first, hi - lo)))
                xs = x_old[affected].copy()
                t_end = (k + 1) * h_ref
                t_prev = np.full(affected.size, k * h_ref)
                w_prev = np.zeros(affected.size)
                total = dw[affected, k]
                for r in range(int(rank.max()) + 1):
                    sel = np.nonzero(rank == r)[0]
                    pos = np.searchsorted(affected, paths[sel])
                    s = j_time[lo:hi][sel]
                    span = np.maximum(t_end - t_prev[pos], 1e-300)
                    lead = np.clip(s - t_prev[pos], 0.0, span)
                    mean = (total[pos] - w_prev[pos]) * lead / span
                    spread = np.sqrt(np.maximum(lead * (span - lead) / span, 0.0))
                    dw_sub = mean + spread * j_normal[lo:hi][sel]
                    xp = xs[pos]
                    xp = xp + drift(xp) * lead + model.b(xp) * dw_sub
                    xs[pos] = np.asarray(solve_flow(model, xp, j_size[lo:hi][sel], order=0, tol=tol,
                                                    allow_nonfinite=True).value)
                    t_prev[pos] = t_prev[pos] + lead
                    w_prev[pos] = w_prev[pos] + dw_sub
                rest = np.maximum(t_end - t_prev, 0.0)
                xs = xs + drift(xs) * rest + model.b(xs) * (total - w_prev)
                x[affected] = xs
            if record:
                states.append(x)
    return noise.by_path(np.stack(states, axis=1) if record else x)


# ---------------------------------------------------------------------------
# Exact linear oracle
# ---------------------------------------------------------------------------

def _linear_params(model: CoefficientModel) -> Tuple[float, float, float]:
    if model.name != "linear":
        raise ValueError(f"The exact oracle needs the linear model, got '{model.name}'")
    return model.params


def exact_linear_batch(model: CoefficientModel, noise: NoiseBatch, x0, h: Optional[float] = None,
                       record: bool = False) -> np.ndarray:
    """x0 exp(alpha t + beta W_t + M Z_t) on the grid k*h from the batch noise, coordinatewise."""
    alpha, beta, jump = _linear_params(model)
    _check_dim(model, noise)
    h = noise.T if h is None else h
    w, z = noise.cumulative(h)
    t = np.arange(w.shape[1]) * h
    with np.errstate(over="ignore"):
        states = noise.flat_states(x0)[:, None] * np.exp(alpha * t[None, :] + beta * w + jump * z)
    return noise.by_path(states if record else states[:, -1])


# ---------------------------------------------------------------------------
# Single-path entry points
# ---------------------------------------------------------------------------

def _single_noise(levy: LevyModel, stream: IncrementStream, T: float, base_step: float) -> NoiseBatch:
    return NoiseBatch.from_path_noise([stream.path_noise(levy, T, base_step)])


def _grid(h: float, steps: int) -> np.ndarray:
    return np.arange(steps + 1) * h


def simulate_wz_path(model: CoefficientModel, levy: LevyModel, x0: float, T: float, h: float,
                     stream: IncrementStream, base_step: Optional[float] = None,
                     tol: float = MC_ODE_TOL) -> PathGrid:
    """Wong-Zakai path with exact increments; base_step fixes the shared noise grid for coupling."""
    if h <= 0:
        raise ValueError(f"Step must be positive, got {h}")
    if model.dim_state != 1:
        raise ValueError("Single-path entry points are scalar; diagonal models run through simulate_wz_batch")
    steps = _step_count(T, h)
    noise = _single_noise(levy, stream, T, base_step or h)
    dw, dz = noise.increments(h)
    x = float(x0)
    states = [x]
    for k in range(steps):
        x = float(wz_step(model, x, h, dw[0, k], dz[0, k], tol=tol))
        states.append(x)
    return PathGrid(h=h, times=_grid(h, steps), states=np.array(states), stream_ref=stream.stream_ref,
                    scheme_tag="wong_zakai", dw=dw[0], dz=dz[0])


def simulate_reference_path(model: CoefficientModel, levy: LevyModel, x0: float, T: float, h_fine: float,
                            stream: IncrementStream, base_step: Optional[float] = None,
                            tol: float = MC_ODE_TOL, small_jump_only: bool = False) -> PathGrid:
    """Jump-adapted reference path on the grid k*h_fine, driven by the same stream as the scheme."""
    steps = _step_count(T, h_fine)
    noise = _single_noise(levy, stream, T, base_step or h_fine)
    if small_jump_only:
        noise = noise.without_big_jumps()
    states = simulate_reference_batch(model, noise, x0, h_fine, tol=tol, record=True)[0]
    dw, dz = noise.increments(h_fine)
    return PathGrid(h=h_fine, times=_grid(h_fine, steps), states=states, stream_ref=stream.stream_ref,
                    scheme_tag="small_jump_only" if small_jump_only else "ito_reference", dw=dw[0], dz=dz[0])


def exact_linear_path(alpha: float, beta: float, M: float, levy: LevyModel, x0: float, T: float,
                      stream: IncrementStream, h: Optional[float] = None,
                      base_step: Optional[float] = None) -> PathGrid:
    """x0 exp(alpha t + beta W_t + M Z_t) on the grid k*h (h defaults to the base step, else T)."""
    h = h or base_step or T
    steps = _step_count(T, h)
    noise = _single_noise(levy, stream, T, base_step or h)
    states = exact_linear_batch(builtin_model("linear", [alpha, beta, M]), noise, x0, h, record=True)[0]
    dw, dz = noise.increments(h)
    return PathGrid(h=h, times=_grid(h, steps), states=states, stream_ref=stream.stream_ref,
                    scheme_tag="exact_linear", dw=dw[0], dz=dz[0])


# ---------------------------------------------------------------------------
# Effective drift
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EffectiveDrift:
    """Drift of the Ito form of the small-jump Marcus process.

    evaluate(x) = a + b'b/2 + int_{|z|<=1} (phi^z(x) - x - c(x) z) nu(dz);
    full_drift adds the big-jump term int_{|z|>1} (phi^z(x) - x) nu(dz).
    """
    model: CoefficientModel
    levy: LevyModel
    quadrature: SmallJumpQuadrature
    tol: float = DEFAULT_ODE_TOL

    @classmethod
    def build(cls, model: CoefficientModel, levy: LevyModel, tol: float = DEFAULT_ODE_TOL,
              truncated: bool = False) -> "EffectiveDrift":
        return cls(model=model, levy=levy, quadrature=small_jump_quadrature(levy, truncated=truncated), tol=tol)

    def stratonovich_correction(self, x) -> np.ndarray:
        """a-ring minus a, i.e. b'(x) b(x) / 2."""
        return self.model.stratonovich_correction(x)

    def flows_at_nodes(self, x) -> np.ndarray:
        """phi^{z_i}(x) for every quadrature node, shape x.shape + (n_nodes,)."""
        x = np.asarray(x, dtype=float)
        return np.asarray(solve_flow(self.model, x[..., None], self.quadrature.nodes, order=0, tol=self.tol).value)

    def jump_integral(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.model.c_is_constant or (self.quadrature.size == 0 and self.quadrature.second_moment_below == 0.0):
            return np.zeros_like(x)
        cx = self.model.c(x)
        integrand = self.flows_at_nodes(x) - x[..., None] - cx[..., None] * self.quadrature.nodes
        taylor = 0.5 * cx * self.model.deriv_c(x, 1) * self.quadrature.second_moment_below
        return self.quadrature.integrate(integrand) + taylor

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.model.a(x) + self.stratonovich_correction(x) + self.jump_integral(x)

    def between_jumps_drift(self, x) -> np.ndarray:
        """Drift used by the reference integrator between jump times."""
        return _between_jumps_drift(self.model, self.levy.small_compensator)(np.asarray(x, dtype=float))

    def big_jump_integral(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        total = np.zeros_like(x)
        positions, masses = big_jump_atoms(self.levy)
        if positions.size:
            flows = np.asarray(solve_flow(self.model, x[..., None], positions, tol=self.tol).value)
            total = total + (flows - x[..., None]) @ masses
        if not self.levy.has_density or self.levy.big_jump_intensity == 0.0:
            return total
        reference_mass = self.levy.big_jump_intensity
        for j in range(HNU_MAX_WINDOWS):
            nodes, weights = big_jump_window(self.levy, j)
            flows = np.asarray(solve_flow(self.model, x[..., None], nodes, tol=self.tol).value)
            total = total + (flows - x[..., None]) @ weights
            if self.levy.mass_outside(2.0 ** (j + 1)) <= BIG_JUMP_MASS_TOL * reference_mass:
                return total
        raise QuadratureError(f"Big-jump integral for {self.levy.family} did not reach negligible tail mass")

    def full_drift(self, x) -> np.ndarray:
        """Drift of the compensated Ito form over all jumps."""
        return self.evaluate(x) + self.big_jump_integral(x)


def effective_drift_eval(ed: EffectiveDrift, x):
    """Effective drift of the small-jump process at x."""
    value = ed.evaluate(x)
    return float(value) if np.ndim(value) == 0 else value


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def path_frame(path_indices: np.ndarray, times: np.ndarray, scheme: np.ndarray,
               oracle: np.ndarray) -> pd.DataFrame:
    """Long-format frame (path_index, k, t, scheme, oracle) of coupled trajectories.

    Diagonal trajectories (n_paths, dim, n_points) get a coord column after path_index.
    """
    if scheme.ndim == 3:
        n_paths, dim, n_points = scheme.shape
        frame = path_frame(np.repeat(np.asarray(path_indices), dim), times, scheme.reshape(-1, n_points),
                           oracle.reshape(-1, n_points))
        frame.insert(1, "coord", np.repeat(np.tile(np.arange(dim), n_paths), n_points))
        return frame
    n_paths, n_points = scheme.shape
    return pd.DataFrame({
        "path_index": np.repeat(np.asarray(path_indices), n_points),
        "k": np.tile(np.arange(n_points), n_paths),
        "t": np.tile(times, n_paths),
        "scheme": scheme.ravel(),
        "oracle": oracle.ravel(),
    })
