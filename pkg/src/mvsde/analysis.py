"""Comparison functions, modulus checks, rate regression and Monte Carlo statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import nnls

from .errors import ArgumentError
from .kernels import ModulusFn

logger = logging.getLogger(__name__)

DEFAULT_ETA = math.exp(-2.0)


@dataclass(frozen=True)
class RhoEta:
    """rho_eta(x) = x log(1/x) on (0, eta], (log(1/eta) - 1) x + eta beyond, 0 at 0."""

    eta: float = DEFAULT_ETA

    def __post_init__(self):
        if not 0.0 < self.eta < math.exp(-1.0):
            raise ArgumentError(f"eta must lie in (0, 1/e), got {self.eta}")

    def __call__(self, x: Any) -> Any:
        arr = np.asarray(x, dtype=float)
        if np.any(arr < 0) or np.any(np.isnan(arr)):
            raise ArgumentError("rho_eta is defined for x >= 0")
        inner = np.where((arr > 0) & (arr <= self.eta), arr, self.eta)
        small = np.where(arr > 0, inner * np.log(1.0 / inner), 0.0)
        large = (math.log(1.0 / self.eta) - 1.0) * arr + self.eta
        out = np.where(arr <= self.eta, small, large)
        return float(out) if out.ndim == 0 else out


def rho_eta(x: Any, eta: float = DEFAULT_ETA) -> Any:
    return RhoEta(eta)(x)


@dataclass(frozen=True)
class DominationReport:
    eta: Optional[float]
    passed: bool
    violating_x: Optional[float]
    linear_ok: bool
    quadratic_ok: bool


def _dominated(gamma: ModulusFn, eta: float, grid: np.ndarray) -> tuple[bool, bool, Optional[float]]:
    rho = RhoEta(eta)
    tol = 1e-12
    lin = gamma.times(grid) <= rho(grid) * (1 + tol) + tol
    quad = gamma.times(grid, 2) <= rho(grid * grid) * (1 + tol) + tol
    bad = grid[~(lin & quad)]
    return bool(lin.all()), bool(quad.all()), (float(bad[0]) if bad.size else None)


def check_modulus_domination(
    gamma: ModulusFn,
    eta: Optional[float] = None,
    grid: Optional[Sequence[float]] = None,
) -> DominationReport:
    """Check x gamma(x) <= rho_eta(x) and x^2 gamma(x) <= rho_eta(x^2) on a grid.

    With ``eta=None`` the largest eta = exp(-L), L in [2, 50], that dominates is
    found by bisection on L.
    """
    xs = np.logspace(-9, 1, 2001) if grid is None else np.asarray(grid, dtype=float)
    if xs.size == 0 or np.any(xs <= 0):
        raise ArgumentError("domination grid must be nonempty and positive")
    if eta is not None:
        lin, quad, bad = _dominated(gamma, eta, xs)
        return DominationReport(eta, lin and quad, bad, lin, quad)

    lo, hi = 2.0, 50.0
    lin, quad, bad = _dominated(gamma, math.exp(-hi), xs)
    if not (lin and quad):
        logger.info("no eta in [exp(-50), exp(-2)] dominates %s (first violation at x=%g)", gamma.name, bad)
        return DominationReport(None, False, bad, lin, quad)
    if all(_dominated(gamma, math.exp(-lo), xs)[:2]):
        return DominationReport(math.exp(-lo), True, None, True, True)
    for _ in range(60):
        mid = (lo + hi) / 2.0
        if all(_dominated(gamma, math.exp(-mid), xs)[:2]):
            hi = mid
        else:
            lo = mid
    return DominationReport(math.exp(-hi), True, None, True, True)


def bihari_bound(g0: float, q_integral: float, eta: float = DEFAULT_ETA) -> float:
    """g0 ** exp(-q_integral), the log-modulus Bihari estimate; needs 0 < g0 < eta."""
    if not 0.0 < eta < math.exp(-1.0):
        raise ArgumentError(f"eta must lie in (0, 1/e), got {eta}")
    if not 0.0 < g0 < eta:
        raise ArgumentError(f"bihari_bound needs 0 < g0 < eta = {eta:.6g}, got g0 = {g0!r}")
    if q_integral < 0:
        raise ArgumentError("q_integral must be nonnegative")
    return float(g0 ** math.exp(-q_integral))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    residuals: np.ndarray
    stderr: float = float("nan")

    def predict(self, xs: Any) -> np.ndarray:
        return np.exp(self.intercept) * np.asarray(xs, dtype=float) ** self.slope


def _positive(values: Sequence[float], label: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or np.any(~np.isfinite(arr)) or np.any(arr <= 0):
        raise ArgumentError(f"{label} must be finite and positive")
    return arr


def fit_rate(xs: Sequence[float], errs: Sequence[float]) -> RateFit:
    x, e = _positive(xs, "xs"), _positive(errs, "errs")
    if x.size != e.size:
        raise ArgumentError(f"{x.size} xs for {e.size} errs")
    if x.size < 3:
        raise ArgumentError(f"fit_rate needs at least 3 points, got {x.size}")
    if np.unique(x).size != x.size:
        raise ArgumentError("xs must be distinct")
    lx, le = np.log(x), np.log(e)
    fit = stats.linregress(lx, le)
    residuals = le - (fit.intercept + fit.slope * lx)
    ss_tot = float(np.sum((le - le.mean()) ** 2))
    r2 = 1.0 - float(np.sum(residuals ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(fit.slope), float(fit.intercept), min(max(r2, 0.0), 1.0), residuals, float(fit.stderr))


def alpha_envelope_check(hs: Sequence[float], errs: Sequence[float], alpha: float, tolerance: float = 0.0) -> bool:
    """True iff squared errors decay at least like h^(2 alpha): fitted slope >= 2 alpha - tolerance."""
    if not 0.0 < alpha < 0.5:
        raise ArgumentError(f"alpha must lie in (0, 1/2), got {alpha}")
    h, e = _positive(hs, "hs"), _positive(errs, "errs")
    if h.size < 2 or h.size != e.size:
        raise ArgumentError("alpha_envelope_check needs at least 2 (h, err) pairs")
    if np.any(np.diff(h) >= 0):
        raise ArgumentError("h values must be strictly decreasing")
    slope = stats.linregress(np.log(h), np.log(e)).slope
    logger.debug("envelope slope %.4f against 2*alpha = %.4f", slope, 2 * alpha)
    return bool(slope >= 2.0 * alpha - tolerance - 1e-9)


@dataclass(frozen=True)
class CombinedFit:
    c_particles: float
    c_step: float
    relative_residual: float


def fit_combined_rate(Ns: Sequence[float], hs: Sequence[float], errs: Sequence[float], alpha: float) -> CombinedFit:
    """Non-negative least squares for err ~ C1 / N + C2 h^(2 alpha)."""
    n = _positive(Ns, "N")
    h = _positive(hs, "h")
    e = _positive(errs, "errs")
    if not n.size == h.size == e.size or n.size < 2:
        raise ArgumentError("fit_combined_rate needs matching (N, h, err) lists of at least 2 points")
    design = np.column_stack([1.0 / n, h ** (2.0 * alpha)]) / e[:, None]
    coef, rnorm = nnls(design, np.ones_like(e))
    return CombinedFit(float(coef[0]), float(coef[1]), float(rnorm / math.sqrt(e.size)))


# ---------------------------------------------------------------------------
# Monte Carlo statistics

@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    stderr: float
    n: int
    values: np.ndarray

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "MonteCarloEstimate":
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            raise ArgumentError("no replications")
        stderr = float(np.std(arr, ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else float("nan")
        return cls(float(np.mean(arr)), stderr, int(arr.size), arr)


def within_standard_errors(estimate: MonteCarloEstimate, target: float, k: float = 3.0, slack: float = 0.0) -> bool:
    """|mean - target| <= k * stderr + slack."""
    se = 0.0 if math.isnan(estimate.stderr) else estimate.stderr
    return abs(estimate.mean - target) <= k * se + slack


def chi2_variance_band(variance: float, n: int, sigmas: float = 4.0) -> tuple[float, float]:
    """Band for the sample variance of n normal draws with true ``variance``, at +/- ``sigmas`` normal quantiles."""
    if n < 2:
        raise ArgumentError("variance band needs n >= 2")
    p = stats.norm.sf(sigmas)
    dof = n - 1
    return variance * stats.chi2.ppf(p, dof) / dof, variance * stats.chi2.isf(p, dof) / dof


def mean_band(mean: float, std: float, n: int, sigmas: float = 4.0) -> tuple[float, float]:
    half = sigmas * std / math.sqrt(n)
    return mean - half, mean + half
