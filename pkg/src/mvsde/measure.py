"""Empirical measures, moments and Wasserstein distances between equal-size clouds."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import ArgumentError, UnsupportedError

logger = logging.getLogger(__name__)

DEFAULT_ASSIGNMENT_CAP = 512
BRUTE_FORCE_CAP = 8
_SUM_BLOCK = 64


def compensated_sum(values: Any, axis: int = -1, block: int = _SUM_BLOCK) -> np.ndarray:
    """Sum along ``axis`` in a canonical order with Neumaier compensation.

    Each reduction vector is sorted by value first, so the result depends only on
    the multiset of summands and not on their position. Blocks of ``block``
    sorted values are summed by numpy and the block partial sums are
    accumulated with a running compensation term.
    """
    v = np.sort(np.moveaxis(np.asarray(values, dtype=float), axis, -1), axis=-1)
    n = v.shape[-1]
    total = np.zeros(v.shape[:-1])
    comp = np.zeros(v.shape[:-1])
    for start in range(0, n, block):
        part = v[..., start:start + block].sum(axis=-1)
        t = total + part
        comp += np.where(np.abs(total) >= np.abs(part), (total - t) + part, (part - t) + total)
        total = t
    return total + comp


def compensated_mean(values: Any, axis: int = -1, block: int = _SUM_BLOCK) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    n = arr.shape[axis]
    if n == 0:
        raise ArgumentError("mean over an empty axis")
    return compensated_sum(arr, axis=axis, block=block) / n


def as_points(measure: Any) -> np.ndarray:
    pts = measure.points if hasattr(measure, "points") else np.asarray(measure, dtype=float)
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if pts.ndim != 2:
        raise ArgumentError(f"expected an (N, d) array of points, got shape {pts.shape}")
    if pts.shape[0] == 0:
        raise ArgumentError("empty measure")
    return pts


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniform atomic measure (1/N) sum delta_{x_i} on an ordered list of points."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2:
            raise ArgumentError(f"points must be (N, d), got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ArgumentError("an empirical measure needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ArgumentError("empirical measure has non-finite coordinates")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def moment(self, p: float = 2.0) -> float:
        return moment(self, p)

    def mean(self) -> np.ndarray:
        return compensated_mean(self.points, axis=0)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    pairing: np.ndarray
    cost: float
    p: float

    def __post_init__(self):
        pairing = np.asarray(self.pairing, dtype=int)
        if not np.array_equal(np.sort(pairing), np.arange(pairing.size)):
            raise ArgumentError("pairing is not a permutation")
        pairing.flags.writeable = False
        object.__setattr__(self, "pairing", pairing)


def _check_p(p: float) -> float:
    p = float(p)
    if not p >= 1.0:
        raise ArgumentError(f"Wasserstein order p must be >= 1, got {p}")
    return p


def _pair(mu: Any, nu: Any) -> tuple[np.ndarray, np.ndarray]:
    x, y = as_points(mu), as_points(nu)
    if x.shape[1] != y.shape[1]:
        raise ArgumentError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] != y.shape[0]:
        raise UnsupportedError(
            f"measures have {x.shape[0]} and {y.shape[0]} points",
            "Only equal-size empirical measures are supported",
        )
    for arr in (x, y):
        if not np.all(np.isfinite(arr)):
            raise ArgumentError("measure has non-finite coordinates")
    return x, y


def _plan_cost(x: np.ndarray, y: np.ndarray, p: float) -> float:
    dist = np.linalg.norm(x - y, axis=1) if x.shape[1] > 1 else np.abs(x[:, 0] - y[:, 0])
    return float(compensated_mean(dist ** p) ** (1.0 / p))


def wasserstein_1d(mu: Any, nu: Any, p: float = 1.0) -> float:
    """Exact W_p on the line by pairing order statistics."""
    p = _check_p(p)
    x, y = _pair(mu, nu)
    if x.shape[1] != 1:
        raise UnsupportedError(
            f"wasserstein_1d needs d = 1, got d = {x.shape[1]}",
            "Use wasserstein_assignment for multi-dimensional clouds",
        )
    return _plan_cost(np.sort(x, axis=0), np.sort(y, axis=0), p)


def wasserstein_assignment(
    mu: Any, nu: Any, p: float = 2.0, cap: int = DEFAULT_ASSIGNMENT_CAP
) -> TransportPlan:
    """Exact W_p between equal-size clouds by optimal assignment."""
    p = _check_p(p)
    x, y = _pair(mu, nu)
    n = x.shape[0]
    if n > cap:
        raise UnsupportedError(
            f"{n} points exceed the assignment cap of {cap}",
            "Use wasserstein_1d for d = 1 or wasserstein_coupling_bound for an upper bound",
        )
    cost = cdist(x, y, metric="euclidean") ** p
    rows, cols = linear_sum_assignment(cost)
    pairing = np.empty(n, dtype=int)
    pairing[rows] = cols
    value = float(compensated_mean(cost[np.arange(n), pairing]) ** (1.0 / p))
    return TransportPlan(pairing=pairing, cost=value, p=p)


def wasserstein_coupling_bound(mu: Any, nu: Any, p: float = 2.0) -> float:
    """W_p upper bound from the identity coupling x_i <-> y_i."""
    p = _check_p(p)
    x, y = _pair(mu, nu)
    return _plan_cost(x, y, p)


def wasserstein_distance(
    mu: Any, nu: Any, p: float = 2.0, cap: int = DEFAULT_ASSIGNMENT_CAP
) -> float:
    """W_p by the best available method; beyond the cap an upper bound is returned."""
    x, y = _pair(mu, nu)
    if x.shape[1] == 1:
        return wasserstein_1d(x, y, p)
    if x.shape[0] <= cap:
        return wasserstein_assignment(x, y, p, cap=cap).cost
    logger.warning(
        "%d points above assignment cap %d; returning the identity-coupling bound", x.shape[0], cap
    )
    return wasserstein_coupling_bound(x, y, p)


def brute_force_wasserstein(mu: Any, nu: Any, p: float = 2.0) -> float:
    p = _check_p(p)
    x, y = _pair(mu, nu)
    n = x.shape[0]
    if n > BRUTE_FORCE_CAP:
        raise UnsupportedError(f"brute force over {n}! pairings", f"Keep N <= {BRUTE_FORCE_CAP}")
    cost = cdist(x, y, metric="euclidean") ** p
    best = min(cost[np.arange(n), list(perm)].sum() for perm in itertools.permutations(range(n)))
    return float((best / n) ** (1.0 / p))


def moment(mu: Any, p: float = 2.0) -> float:
    """(1/N) sum |x_i|^p."""
    x = as_points(mu)
    if not np.all(np.isfinite(x)):
        raise ArgumentError("measure has non-finite coordinates")
    norms = np.linalg.norm(x, axis=1)
    return float(compensated_mean(norms ** float(p)))
