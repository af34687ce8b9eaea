"""Euler particle systems: the N-interacting system and the non-interacting limit particles.

Both systems are driven by an (InitialSample, BrownianBundle) pair. Running
them on the same pair is the synchronous coupling used by the chaos and
combined-rate estimates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from .errors import ArgumentError, BlowUpError
from .kernels import KernelPair, mean_field_diffusion, mean_field_drift
from .measure import compensated_mean, compensated_sum
from .paths import BrownianBundle, InitialSample, TimeGrid

if TYPE_CHECKING:
    from .picard import LawFlow

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    time: float
    states: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.states

    @property
    def size(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States of N particles at every time of ``grid``, shape (M + 1, N, d)."""

    grid: TimeGrid
    states: np.ndarray
    particle_ids: np.ndarray

    @property
    def n_particles(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def cloud(self, k: int) -> ParticleCloud:
        return ParticleCloud(float(self.grid.times[k]), self.states[k])

    @property
    def clouds(self) -> list[ParticleCloud]:
        return [self.cloud(k) for k in range(self.states.shape[0])]

    def running_sup_square(self, reference: Optional["Trajectory"] = None) -> np.ndarray:
        """(M + 1, N) running max over grid times of |X|^2, or of |X - reference|^2."""
        x = self.states
        if reference is not None:
            x = x - _aligned(reference, self.grid)
        return np.maximum.accumulate(np.sum(x * x, axis=-1), axis=0)

    def sup_square(self, reference: Optional["Trajectory"] = None) -> np.ndarray:
        return self.running_sup_square(reference)[-1]


def _aligned(traj: Trajectory, grid: TimeGrid) -> np.ndarray:
    factor = traj.grid.refinement_factor(grid)
    return traj.states[::factor]


def _check_inputs(kernel: KernelPair, init: InitialSample, bundle: BrownianBundle) -> np.ndarray:
    x0 = np.asarray(init.points, dtype=float)
    if x0.ndim != 2 or x0.shape[1] != kernel.dim:
        raise ArgumentError(f"initial sample has shape {x0.shape}, kernel dimension is {kernel.dim}")
    if x0.shape[0] != bundle.n_particles:
        raise ArgumentError(f"initial sample has {x0.shape[0]} points, bundle {bundle.n_particles} particles")
    if bundle.dim != kernel.dim:
        raise ArgumentError(f"bundle dimension {bundle.dim} does not match kernel dimension {kernel.dim}")
    return x0


def _euler(
    kernel: KernelPair,
    x0: np.ndarray,
    bundle: BrownianBundle,
    grid: TimeGrid,
    cloud_at: Callable[[int, np.ndarray], np.ndarray],
    workers: int,
) -> Trajectory:
    h = grid.step
    times = grid.times
    states = np.empty((grid.n_steps + 1,) + x0.shape)
    states[0] = x0
    view = bundle.restrict(grid)
    for k, dw in enumerate(view.iter_increments()):
        x = states[k]
        cloud = cloud_at(k, x)
        with np.errstate(over="ignore", invalid="ignore"):
            drift = mean_field_drift(kernel, x, cloud, workers=workers)
            sigma = mean_field_diffusion(kernel, x, cloud, workers=workers)
            nxt = x + drift * h + np.sum(sigma * dw[:, None, :], axis=-1)
        finite = np.all(np.isfinite(nxt), axis=1)
        if not finite.all():
            row = int(np.flatnonzero(~finite)[0])
            bad = nxt[row][~np.isfinite(nxt[row])][0]
            raise BlowUpError(k + 1, float(times[k + 1]), int(bundle.particle_ids[row]), float(bad))
        states[k + 1] = nxt
    states.flags.writeable = False
    return Trajectory(grid, states, bundle.particle_ids)


def euler_interacting(
    kernel: KernelPair,
    init: InitialSample,
    bundle: BrownianBundle,
    grid: TimeGrid,
    workers: int = 1,
) -> Trajectory:
    """Euler scheme of the N-interacting system; every particle reads the step-k cloud."""
    x0 = _check_inputs(kernel, init, bundle)
    logger.debug("interacting run: N=%d, M=%d, kernel=%s", x0.shape[0], grid.n_steps, kernel.name)
    return _euler(kernel, x0, bundle, grid, lambda k, x: x, workers)


def reference_interacting(
    kernel: KernelPair,
    init: InitialSample,
    bundle: BrownianBundle,
    fine_grid: Optional[TimeGrid] = None,
    workers: int = 1,
) -> Trajectory:
    """The interacting system on the finest grid, the stand-in for the continuous-time system."""
    return euler_interacting(kernel, init, bundle, fine_grid or bundle.fine_grid, workers)


def euler_limit_particles(
    kernel: KernelPair,
    init: InitialSample,
    bundle: BrownianBundle,
    grid: TimeGrid,
    law: "LawFlow",
    workers: int = 1,
) -> Trajectory:
    """Independent particles whose coefficients average the kernel against ``law`` at each grid time."""
    x0 = _check_inputs(kernel, init, bundle)
    if law.dim != kernel.dim:
        raise ArgumentError(f"law flow lives in R^{law.dim}, kernel in R^{kernel.dim}")
    index = law.indices_for(grid)
    return _euler(kernel, x0, bundle, grid, lambda k, x: law.points[index[k]], workers)


@dataclass(frozen=True, eq=False)
class CoupledError:
    """Per-particle sup-square differences of two synchronously coupled runs."""

    per_particle: np.ndarray
    mean: float
    stderr: float
    interacting: Trajectory
    limit: Trajectory

    @property
    def n_particles(self) -> int:
        return self.per_particle.size


def _summarise(per_particle: np.ndarray, interacting: Trajectory, limit: Trajectory) -> CoupledError:
    n = per_particle.size
    mean = float(compensated_mean(per_particle))
    stderr = float(np.std(per_particle, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    per_particle.flags.writeable = False
    return CoupledError(per_particle, mean, stderr, interacting, limit)


def coupled_chaos_error(
    kernel: KernelPair,
    init: InitialSample,
    bundle: BrownianBundle,
    grid: TimeGrid,
    law: "LawFlow",
    workers: int = 1,
) -> CoupledError:
    """max_k |X^{N,i}_{t_k} - X^i_{t_k}|^2 per particle, interacting vs limit on one (init, bundle)."""
    interacting = euler_interacting(kernel, init, bundle, grid, workers)
    limit = euler_limit_particles(kernel, init, bundle, grid, law, workers)
    return _summarise(interacting.sup_square(limit), interacting, limit)


def coupled_overall_error(
    kernel: KernelPair,
    init: InitialSample,
    bundle: BrownianBundle,
    grid: TimeGrid,
    law: "LawFlow",
    workers: int = 1,
) -> CoupledError:
    """Coarse-grid interacting Euler against finest-grid limit particles, compared on the coarse times."""
    interacting = euler_interacting(kernel, init, bundle, grid, workers)
    limit = euler_limit_particles(kernel, init, bundle, bundle.fine_grid, law, workers)
    return _summarise(interacting.sup_square(limit), interacting, limit)


# ---------------------------------------------------------------------------
# Centered kernels

@dataclass(frozen=True)
class CenteredStats:
    n_particles: int
    time: float
    drift_correlation: float
    drift_variance: float
    drift_variance_per_particle: np.ndarray
    diffusion_correlation: float
    diffusion_variance: float
    diffusion_variance_per_particle: np.ndarray

    def as_dict(self) -> dict:
        return {
            "n_particles": self.n_particles,
            "time": self.time,
            "drift_correlation": self.drift_correlation,
            "drift_variance": self.drift_variance,
            "drift_n_times_variance": self.n_particles * self.drift_variance,
            "diffusion_correlation": self.diffusion_correlation,
            "diffusion_variance": self.diffusion_variance,
            "diffusion_n_times_variance": self.n_particles * self.diffusion_variance,
        }


def _centered_moments(centered: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-term correlation over j != k (both != i) and per-i |(1/N) sum_j centered_ij|^2.

    ``centered`` has shape (N, N, ...) with the trailing axes flattened into one
    inner product.
    """
    n = centered.shape[0]
    flat = centered.reshape(n, n, -1)
    off = flat.copy()
    off[np.arange(n), np.arange(n)] = 0.0
    row_sum = compensated_sum(off, axis=1)
    row_sq = compensated_sum(np.sum(off * off, axis=-1), axis=1)
    cross = compensated_sum(np.sum(row_sum * row_sum, axis=-1) - row_sq)
    second = compensated_sum(row_sq) / (n * (n - 1))
    mean_cross = cross / (n * (n - 1) * (n - 2))
    correlation = float(mean_cross / second) if second > 0 else 0.0
    avg = compensated_mean(flat, axis=1)
    per_particle = np.sum(avg * avg, axis=-1)
    return correlation, per_particle


def centered_kernel_stats(
    kernel: KernelPair,
    limit_traj: Trajectory,
    law: "LawFlow",
    time_index: int = -1,
    workers: int = 1,
) -> CenteredStats:
    """Orthogonality and variance of the centered kernels b~, sigma~ over i.i.d. limit particles.

    b~(x, x') = b(x, x') - int b(x, y) mu_t(dy), with mu_t taken from ``law``.
    """
    n = limit_traj.n_particles
    if n < 3:
        raise ArgumentError(f"centered kernel statistics need at least 3 particles, got {n}")
    k = range(limit_traj.states.shape[0])[time_index]
    x = limit_traj.states[k]
    t = float(limit_traj.grid.times[k])
    law_points = law.points[law.indices_for(limit_traj.grid)[k]]

    pair_drift = kernel.drift(x[:, None, :], x[None, :, :])
    centered_drift = pair_drift - mean_field_drift(kernel, x, law_points, workers)[:, None, :]
    pair_diff = kernel.diffusion(x[:, None, :], x[None, :, :])
    centered_diff = pair_diff - mean_field_diffusion(kernel, x, law_points, workers)[:, None, :, :]

    drift_corr, drift_var = _centered_moments(centered_drift)
    diff_corr, diff_var = _centered_moments(centered_diff)
    stats = CenteredStats(
        n_particles=n,
        time=t,
        drift_correlation=drift_corr,
        drift_variance=float(compensated_mean(drift_var)),
        drift_variance_per_particle=drift_var,
        diffusion_correlation=diff_corr,
        diffusion_variance=float(compensated_mean(diff_var)),
        diffusion_variance_per_particle=diff_var,
    )
    logger.debug("centered stats at t=%.4g: %s", t, stats.as_dict())
    return stats
