"""Law flows and the distribution-iterated (Picard) solver of the limit equation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np
import pandas as pd
from scipy.stats import linregress

from .errors import ArgumentError, NonConvergenceError, UnsupportedError
from .kernels import KernelPair
from .measure import (
    DEFAULT_ASSIGNMENT_CAP,
    EmpiricalMeasure,
    compensated_mean,
    wasserstein_coupling_bound,
    wasserstein_distance,
)
from .paths import (
    DEFAULT_MEMORY_BUDGET,
    BrownianBundle,
    InitialSample,
    TimeGrid,
    derive_seed,
    generate_bundle,
    law_moments,
    sample_initial,
)
from .simulator import Trajectory, euler_limit_particles

logger = logging.getLogger(__name__)

LAW_SEED_KEY = 0x4C4157
CONSISTENCY_SEED_KEY = 0x434F4E
ANALYTIC_SEED_KEY = 0x414E41


@dataclass(frozen=True, eq=False)
class LawFlow:
    """One equal-size empirical measure per grid time; ``points`` has shape (M + 1, M_law, d)."""

    grid: TimeGrid
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 3 or pts.shape[0] != self.grid.n_steps + 1:
            raise ArgumentError(
                f"law flow needs one cloud per grid time ({self.grid.n_steps + 1}), got shape {pts.shape}"
            )
        if pts.shape[1] < 1:
            raise ArgumentError("law flow clouds must be nonempty")
        if not np.all(np.isfinite(pts)):
            raise ArgumentError("law flow has non-finite points")
        if pts.flags.writeable:
            pts = pts.copy()
            pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "LawFlow":
        return cls(traj.grid, traj.states)

    @classmethod
    def constant(cls, grid: TimeGrid, cloud: Any) -> "LawFlow":
        pts = np.asarray(cloud, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        return cls(grid, np.broadcast_to(pts, (grid.n_steps + 1,) + pts.shape))

    @property
    def size(self) -> int:
        return self.points.shape[1]

    @property
    def dim(self) -> int:
        return self.points.shape[2]

    def measure_at(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.points[k])

    def indices_for(self, grid: TimeGrid) -> np.ndarray:
        try:
            factor = self.grid.refinement_factor(grid)
        except ArgumentError as e:
            raise ArgumentError(f"law flow has no measure at some times of the simulation grid: {e}") from e
        return np.arange(grid.n_steps + 1) * factor

    def means(self) -> np.ndarray:
        return compensated_mean(self.points, axis=1)

    def variances(self) -> np.ndarray:
        """(M + 1, d) unbiased per-coordinate sample variances."""
        if self.size < 2:
            return np.zeros((self.points.shape[0], self.dim))
        centered = self.points - self.means()[:, None, :]
        return compensated_mean(centered * centered, axis=1) * self.size / (self.size - 1)

    def second_moments(self) -> np.ndarray:
        return compensated_mean(np.sum(self.points * self.points, axis=-1), axis=1)

    def save(self, stem: Union[str, Path]) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        np.save(stem.with_suffix(".npy"), np.ascontiguousarray(self.points))
        pd.DataFrame({"index": np.arange(self.grid.n_steps + 1), "time": self.grid.times}).to_csv(
            stem.with_suffix(".csv"), index=False, float_format="%.17g"
        )

    @classmethod
    def load(cls, stem: Union[str, Path]) -> "LawFlow":
        stem = Path(stem)
        times = pd.read_csv(stem.with_suffix(".csv"))["time"].to_numpy()
        grid = TimeGrid(float(times[-1]), len(times) - 1)
        return cls(grid, np.load(stem.with_suffix(".npy")))


@dataclass(frozen=True)
class PicardReport:
    iterations: int
    gap_history: list[float]
    contraction_ratio: float
    converged: bool
    moment_history: list[float] = field(default_factory=list)
    exact_gap_history: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _same_shape(a: LawFlow, b: LawFlow) -> None:
    if a.points.shape != b.points.shape or a.grid != b.grid:
        raise ArgumentError("law flow gaps need flows on one grid with equal sample counts")


def pathwise_gap(a: LawFlow, b: LawFlow) -> float:
    """sup_t of the identity-coupling bound on W_2^2 between the two flows."""
    _same_shape(a, b)
    return max(wasserstein_coupling_bound(a.points[k], b.points[k], p=2.0) ** 2 for k in range(a.points.shape[0]))


def exact_gap(a: LawFlow, b: LawFlow, checkpoints: int = 5) -> float:
    """max of the exact W_2^2 over ``checkpoints`` evenly spaced grid times."""
    _same_shape(a, b)
    idx = np.unique(np.linspace(0, a.grid.n_steps, checkpoints).round().astype(int))
    return max(wasserstein_distance(a.points[k], b.points[k], p=2.0) ** 2 for k in idx)


def contraction_ratio(gaps: list[float]) -> float:
    """exp of the slope of log(gap) against iteration over the positive gaps."""
    positive = [(k, g) for k, g in enumerate(gaps) if g > 0]
    if len(positive) < 2:
        return 0.0 if gaps and gaps[-1] == 0 else float("nan")
    k, g = zip(*positive)
    return float(math.exp(linregress(k, np.log(g)).slope))


def picard_step(
    kernel: KernelPair,
    law_prev: LawFlow,
    init: InitialSample,
    bundle: BrownianBundle,
    grid: TimeGrid,
    workers: int = 1,
) -> LawFlow:
    traj = euler_limit_particles(kernel, init, bundle, grid, law_prev, workers)
    return LawFlow.from_trajectory(traj)


def picard_solve(
    kernel: KernelPair,
    initial_law: str,
    law_params: Optional[Mapping[str, Any]],
    grid: TimeGrid,
    M_law: int = 4000,
    tol: float = 1e-6,
    max_iter: int = 30,
    seed: int = 0,
    workers: int = 1,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> tuple[LawFlow, PicardReport]:
    """Iterate picard_step from the constant flow until the pathwise gap is <= tol.

    One (init, bundle) pair is reused across iterations.
    """
    if not tol > 0:
        raise ArgumentError(f"tol must be positive, got {tol}")
    if max_iter < 1:
        raise ArgumentError(f"max_iter must be >= 1, got {max_iter}")
    law_seed = derive_seed(seed, LAW_SEED_KEY)
    init = sample_initial(law_seed, initial_law, law_params, M_law, kernel.dim)
    streaming = 8 * M_law * grid.n_steps * kernel.dim > memory_budget
    bundle = generate_bundle(law_seed, M_law, kernel.dim, grid, streaming=streaming, memory_budget=memory_budget)

    law = LawFlow.constant(grid, init.points)
    gaps: list[float] = []
    moments: list[float] = []
    exact: list[float] = []
    converged = False
    for it in range(1, max_iter + 1):
        nxt = picard_step(kernel, law, init, bundle, grid, workers)
        gaps.append(pathwise_gap(law, nxt))
        moments.append(float(np.max(nxt.second_moments())))
        if M_law <= DEFAULT_ASSIGNMENT_CAP:
            exact.append(exact_gap(law, nxt))
        logger.info("picard iteration %d: gap %.3e", it, gaps[-1])
        law = nxt
        if gaps[-1] <= tol:
            converged = True
            break

    report = PicardReport(
        iterations=len(gaps),
        gap_history=gaps,
        contraction_ratio=contraction_ratio(gaps),
        converged=converged,
        moment_history=moments,
        exact_gap_history=exact,
    )
    if not converged:
        raise NonConvergenceError(report, tol)
    return law, report


def _sqrtm_psd(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((cov + cov.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def analytic_linear_flow(
    kernel: KernelPair,
    initial_law: str,
    law_params: Optional[Mapping[str, Any]],
    grid: TimeGrid,
    M_law: int = 4000,
    seed: int = 0,
) -> LawFlow:
    """Exact law flow of the linear kernel: clouds with the closed-form mean and covariance.

    m_t = m_0 exp((a + c) t), Sigma_t = Sigma_0 exp(2 a t) + s^2 (exp(2 a t) - 1) / (2 a) I.
    A whitened standard normal base sample is mapped affinely at every time, so each
    cloud matches the two moments up to rounding. Only the first two moments are exact
    when the initial law is not Gaussian.
    """
    if kernel.name not in ("linear", "zero"):
        raise UnsupportedError(f"no analytic flow for kernel '{kernel.name}'", "Use law_source = picard")
    d = kernel.dim
    if M_law < d + 1:
        raise ArgumentError(f"M_law must exceed the dimension ({d}) to whiten the base sample")
    a = float(kernel.params.get("a", 0.0))
    c = float(kernel.params.get("c", 0.0))
    s = float(kernel.params.get("s", 0.0))
    m0, cov0 = law_moments(initial_law, dict(law_params or {}), d)

    base = sample_initial(derive_seed(seed, ANALYTIC_SEED_KEY), "gaussian", {"mean": 0.0, "cov": 1.0}, M_law, d)
    z = base.points - compensated_mean(base.points, axis=0)
    root = _sqrtm_psd(np.cov(z, rowvar=False).reshape(d, d))
    z = z @ np.linalg.pinv(root)

    points = np.empty((grid.n_steps + 1, M_law, d))
    for k, t in enumerate(grid.times):
        decay = math.exp(2.0 * a * t)
        noise = s * s * (math.expm1(2.0 * a * t) / (2.0 * a) if a != 0 else t)
        cov = cov0 * decay + noise * np.eye(d)
        points[k] = m0 * math.exp((a + c) * t) + z @ _sqrtm_psd(cov)
    return LawFlow(grid, points)


# ---------------------------------------------------------------------------
# Cache

def cache_key(
    kernel: KernelPair,
    initial_law: str,
    law_params: Optional[Mapping[str, Any]],
    grid: TimeGrid,
    M_law: int,
    seed: int,
    tol: float,
) -> str:
    payload = {
        "kernel": kernel.name,
        "kernel_params": dict(kernel.params),
        "initial_law": initial_law,
        "law_params": {k: np.asarray(v).tolist() for k, v in dict(law_params or {}).items()},
        "horizon": grid.horizon,
        "n_steps": grid.n_steps,
        "M_law": int(M_law),
        "seed": int(seed),
        "tol": float(tol),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


class LawFlowCache:
    """Directory of solved law flows: <key>.npy, <key>.csv and <key>.json (PicardReport)."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    def get(self, key: str) -> Optional[tuple[LawFlow, PicardReport]]:
        stem = self.directory / key
        if not (stem.with_suffix(".npy").exists() and stem.with_suffix(".json").exists()):
            return None
        report = PicardReport(**json.loads(stem.with_suffix(".json").read_text()))
        logger.info("law flow cache hit: %s", key[:12])
        return LawFlow.load(stem), report

    def put(self, key: str, flow: LawFlow, report: PicardReport) -> None:
        stem = self.directory / key
        flow.save(stem)
        stem.with_suffix(".json").write_text(json.dumps(report.as_dict(), indent=2))

    def solve(
        self,
        kernel: KernelPair,
        initial_law: str,
        law_params: Optional[Mapping[str, Any]],
        grid: TimeGrid,
        M_law: int = 4000,
        tol: float = 1e-6,
        max_iter: int = 30,
        seed: int = 0,
        workers: int = 1,
    ) -> tuple[LawFlow, PicardReport]:
        key = cache_key(kernel, initial_law, law_params, grid, M_law, seed, tol)
        hit = self.get(key)
        if hit is not None:
            return hit
        flow, report = picard_solve(kernel, initial_law, law_params, grid, M_law, tol, max_iter, seed, workers)
        self.put(key, flow, report)
        return flow, report


# ---------------------------------------------------------------------------
# Self-consistency

@dataclass(frozen=True)
class ConsistencyReport:
    times: list[float]
    z_scores: list[float]
    n_se: float

    @property
    def max_z(self) -> float:
        return max(self.z_scores) if self.z_scores else 0.0

    @property
    def passed(self) -> bool:
        return self.max_z <= self.n_se


def self_consistency(
    kernel: KernelPair,
    flow: LawFlow,
    initial_law: str,
    law_params: Optional[Mapping[str, Any]],
    seed: int = 0,
    n_particles: Optional[int] = None,
    checkpoints: int = 5,
    n_se: float = 3.0,
    workers: int = 1,
) -> ConsistencyReport:
    """Re-simulate limit particles under ``flow`` with fresh noise and compare per-time means.

    Means are compared at ``checkpoints`` evenly spaced grid times, coordinate by
    coordinate, in units of the combined standard error of the two samples.
    """
    n = n_particles or flow.size
    fresh_seed = derive_seed(seed, CONSISTENCY_SEED_KEY)
    init = sample_initial(fresh_seed, initial_law, law_params, n, kernel.dim)
    bundle = generate_bundle(fresh_seed, n, kernel.dim, flow.grid)
    replay = LawFlow.from_trajectory(euler_limit_particles(kernel, init, bundle, flow.grid, flow, workers))

    idx = np.unique(np.linspace(0, flow.grid.n_steps, checkpoints).round().astype(int))
    diff = np.abs(replay.means()[idx] - flow.means()[idx])
    se = np.sqrt(replay.variances()[idx] / replay.size + flow.variances()[idx] / flow.size)
    z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 1e-12, np.inf, 0.0))
    return ConsistencyReport(
        times=[float(t) for t in flow.grid.times[idx]],
        z_scores=[float(v) for v in np.max(z, axis=1)],
        n_se=n_se,
    )
