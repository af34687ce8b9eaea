"""Time grids, refinement-consistent Brownian increments and initial samples.

Randomness is counter-based: increments for particle ``p`` over the block of
finest steps ``[k * BLOCK_STEPS, (k + 1) * BLOCK_STEPS)`` come from a Philox
generator keyed by ``(seed, p, k)``. Generation order, particle order and
thread schedule therefore never change a value.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import ArgumentError, ConfigError, MemoryBudgetError
from .measure import compensated_sum

logger = logging.getLogger(__name__)

BLOCK_STEPS = 256
DEFAULT_MEMORY_BUDGET = 512 * 2**20

_BROWNIAN_STREAM = 0x42524F57
_INITIAL_STREAM = 0x494E4954


def derive_seed(seed: int, *keys: int) -> int:
    """A 64-bit seed derived from ``seed`` and integer keys, independent of call order."""
    state = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(k) for k in keys]])
    return int(state.generate_state(1, dtype=np.uint64)[0])


def _philox(seed: int, *keys: int) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed) & (2**64 - 1), *keys]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k T / M, k = 0..M."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon > 0 or not math.isfinite(self.horizon):
            raise ArgumentError(f"horizon must be positive, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ArgumentError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def from_step(cls, horizon: float, step: float) -> "TimeGrid":
        n = round(horizon / step)
        if n < 1 or abs(n * step - horizon) > 1e-9 * horizon:
            raise ArgumentError(f"step {step!r} does not divide horizon {horizon!r}")
        return cls(horizon, n)

    @property
    def step(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def floor_index(self, t: float) -> int:
        if t < 0 or t > self.horizon * (1 + 1e-12):
            raise ArgumentError(f"time {t} outside [0, {self.horizon}]")
        return min(int(math.floor(t / self.step + 1e-9)), self.n_steps)

    def floor_map(self, t: float) -> float:
        return float(self.times[self.floor_index(t)])

    def refinement_factor(self, coarse: "TimeGrid") -> int:
        """How many of these steps make one step of ``coarse``."""
        if abs(coarse.horizon - self.horizon) > 1e-12 * self.horizon or self.n_steps % coarse.n_steps:
            raise ArgumentError(
                f"grid with {coarse.n_steps} steps on [0, {coarse.horizon}] is not nested in "
                f"{self.n_steps} steps on [0, {self.horizon}]"
            )
        return self.n_steps // coarse.n_steps


def _coarsen(fine: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of ``factor`` steps along axis 1 of an (N, M, d) array."""
    if factor == 1:
        return fine
    n, m, d = fine.shape
    grouped = fine.reshape(n, m // factor, factor, d)
    return compensated_sum(grouped, axis=2, block=1)


@dataclass(frozen=True, eq=False)
class BrownianBundle:
    """Per-particle Brownian increments on ``grid``, derived from the finest grid ``fine_grid``.

    Materialised bundles hold the finest increments in memory; streaming
    bundles regenerate them block by block on every pass.
    """

    seed: int
    particle_ids: np.ndarray
    dim: int
    fine_grid: TimeGrid
    grid: TimeGrid
    streaming: bool = False
    _fine: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_particles(self) -> int:
        return int(self.particle_ids.size)

    @property
    def factor(self) -> int:
        return self.fine_grid.refinement_factor(self.grid)

    def _fine_block(self, block: int) -> np.ndarray:
        start = block * BLOCK_STEPS
        steps = min(BLOCK_STEPS, self.fine_grid.n_steps - start)
        scale = math.sqrt(self.fine_grid.step)
        out = np.empty((self.n_particles, steps, self.dim))
        for row, pid in enumerate(self.particle_ids):
            gen = _philox(self.seed, _BROWNIAN_STREAM, int(pid), block)
            out[row] = gen.standard_normal((BLOCK_STEPS, self.dim))[:steps] * scale
        return out

    def _fine_blocks(self) -> Iterator[np.ndarray]:
        if self._fine is not None:
            yield self._fine
            return
        n_blocks = -(-self.fine_grid.n_steps // BLOCK_STEPS)
        for block in range(n_blocks):
            yield self._fine_block(block)

    @property
    def increments(self) -> np.ndarray:
        """(N, M, d) increments on ``grid``; not available in streaming mode."""
        if self._fine is None:
            raise MemoryBudgetError("streaming bundle has no materialised increments; use iter_increments()")
        return _coarsen(self._fine, self.factor)

    def iter_increments(self) -> Iterator[np.ndarray]:
        factor = self.factor
        pending = np.empty((self.n_particles, 0, self.dim))
        for chunk in self._fine_blocks():
            pending = np.concatenate([pending, chunk], axis=1) if pending.shape[1] else chunk
            usable = (pending.shape[1] // factor) * factor
            if usable:
                coarse = _coarsen(pending[:, :usable], factor)
                for k in range(coarse.shape[1]):
                    yield coarse[:, k]
                pending = pending[:, usable:]

    def take(self, indices: Sequence[int]) -> "BrownianBundle":
        idx = np.asarray(indices, dtype=int)
        fine = None if self._fine is None else self._fine[idx]
        return BrownianBundle(self.seed, self.particle_ids[idx], self.dim, self.fine_grid,
                              self.grid, self.streaming, fine)

    def restrict(self, coarse: TimeGrid) -> "BrownianBundle":
        return restrict(self, coarse)


def generate_bundle(
    seed: int,
    n_particles: int,
    dim: int,
    fine_grid: TimeGrid,
    particle_ids: Optional[Sequence[int]] = None,
    streaming: bool = False,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> BrownianBundle:
    """Brownian increments for ``n_particles`` on ``fine_grid``, keyed by (seed, particle, block)."""
    if n_particles < 1 or dim < 1:
        raise ArgumentError("n_particles and dim must be positive")
    ids = np.arange(n_particles) if particle_ids is None else np.asarray(particle_ids, dtype=int)
    if ids.size != n_particles:
        raise ArgumentError(f"{ids.size} particle ids for {n_particles} particles")
    ids.flags.writeable = False
    nbytes = 8 * n_particles * fine_grid.n_steps * dim
    if streaming:
        logger.debug("streaming bundle: %d particles x %d steps", n_particles, fine_grid.n_steps)
        return BrownianBundle(int(seed), ids, int(dim), fine_grid, fine_grid, True, None)
    if nbytes > memory_budget:
        raise MemoryBudgetError(
            f"bundle needs {nbytes / 2**20:.1f} MiB, above the {memory_budget / 2**20:.1f} MiB budget; "
            "pass streaming=True (or raise memory_budget_mb) to generate increments per step"
        )
    lazy = BrownianBundle(int(seed), ids, int(dim), fine_grid, fine_grid, True, None)
    fine = np.concatenate(list(lazy._fine_blocks()), axis=1)
    fine.flags.writeable = False
    return BrownianBundle(int(seed), ids, int(dim), fine_grid, fine_grid, False, fine)


def restrict(bundle: BrownianBundle, coarse: TimeGrid) -> BrownianBundle:
    """View of ``bundle`` on a coarser nested grid; coarse increments are sums of the finest ones."""
    bundle.grid.refinement_factor(coarse)
    return BrownianBundle(bundle.seed, bundle.particle_ids, bundle.dim, bundle.fine_grid,
                          coarse, bundle.streaming, bundle._fine)


# ---------------------------------------------------------------------------
# Initial laws

def _vector(value: Any, d: int, label: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        arr = np.full(d, float(arr[0]))
    if arr.shape != (d,):
        raise ConfigError(f"{label} must be a scalar or have {d} entries")
    return arr


def _covariance(value: Any, d: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.size == 1:
        return float(arr.reshape(-1)[0]) * np.eye(d)
    if arr.size == d:
        return np.diag(arr.reshape(-1))
    if arr.size == d * d:
        return arr.reshape(d, d)
    raise ConfigError(f"cov must be a scalar, a diagonal of {d} or a {d}x{d} matrix")


def law_moments(law: str, params: Mapping[str, Any], d: int) -> tuple[np.ndarray, np.ndarray]:
    if law == "point_mass":
        return _vector(params.get("x0", 0.0), d, "x0"), np.zeros((d, d))
    if law == "gaussian":
        return _vector(params.get("mean", 0.0), d, "mean"), _covariance(params.get("cov", 1.0), d)
    if law == "uniform_box":
        lo = _vector(params.get("lo", 0.0), d, "lo")
        hi = _vector(params.get("hi", 1.0), d, "hi")
        return (lo + hi) / 2.0, np.diag((hi - lo) ** 2 / 12.0)
    raise ConfigError(f"unknown initial law '{law}' (known: point_mass, gaussian, uniform_box)")


_LAW_KEYS = {"point_mass": {"x0"}, "gaussian": {"mean", "cov"}, "uniform_box": {"lo", "hi"}}


@dataclass(frozen=True, eq=False)
class InitialSample:
    seed: int
    law: str
    params: Mapping[str, Any]
    points: np.ndarray

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def take(self, indices: Sequence[int]) -> "InitialSample":
        pts = self.points[np.asarray(indices, dtype=int)]
        pts.flags.writeable = False
        return InitialSample(self.seed, self.law, self.params, pts)


def sample_initial(seed: int, law: str, params: Optional[Mapping[str, Any]], n: int, d: int) -> InitialSample:
    params = dict(params or {})
    if law not in _LAW_KEYS:
        raise ConfigError(f"unknown initial law '{law}' (known: {', '.join(_LAW_KEYS)})")
    unknown = sorted(set(params) - _LAW_KEYS[law])
    if unknown:
        raise ConfigError(f"initial law '{law}' has no parameter(s) {unknown}")
    if n < 1:
        raise ArgumentError("sample size must be >= 1")
    gen = _philox(seed, _INITIAL_STREAM)
    if law == "point_mass":
        points = np.tile(_vector(params.get("x0", 0.0), d, "x0"), (n, 1))
    elif law == "gaussian":
        mean, cov = law_moments(law, params, d)
        points = gen.multivariate_normal(mean, cov, size=n, method="cholesky")
    else:
        lo = _vector(params.get("lo", 0.0), d, "lo")
        hi = _vector(params.get("hi", 1.0), d, "hi")
        points = gen.uniform(lo, hi, size=(n, d))
    points = np.ascontiguousarray(points, dtype=float)
    points.flags.writeable = False
    return InitialSample(int(seed), law, params, points)
