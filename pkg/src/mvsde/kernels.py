"""Interaction kernels b(x, y), sigma(x, y), their growth/modulus metadata and the catalog.

Kernel callables are vectorised: ``drift(x, y)`` takes arrays of shape (..., d)
that broadcast against each other and returns (..., d); ``diffusion`` returns
(..., d, d).
"""

from __future__ import annotations

import inspect
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Any, Callable, Mapping, Optional

import numpy as np

from .errors import ArgumentError, ConfigError
from .measure import as_points, compensated_mean

logger = logging.getLogger(__name__)

ArrayFn = Callable[[np.ndarray], np.ndarray]
PairFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

DEFAULT_KNOT = math.exp(-2.0)
# elements per chunk of the pairwise interaction tensor
_CHUNK_ELEMENTS = 1 << 21


@dataclass(frozen=True)
class ModulusFn:
    """A modulus gamma with its limit delta = lim gamma(x)/log(1/x) and its sup on [1, inf)."""

    evaluate: ArrayFn
    delta: float
    bound_on_tail: float
    name: str = "modulus"

    def __call__(self, r: Any) -> np.ndarray:
        return self.evaluate(np.asarray(r, dtype=float))

    def times(self, r: np.ndarray, power: int = 1) -> np.ndarray:
        """r**power * gamma(r), extended by 0 at r = 0."""
        r = np.asarray(r, dtype=float)
        safe = np.where(r > 0, r, 1.0)
        return np.where(r > 0, safe ** power * self.evaluate(safe), 0.0)


def constant_modulus(kappa: float = 1.0) -> ModulusFn:
    kappa = float(kappa)
    return ModulusFn(
        evaluate=lambda r: np.full(np.shape(r), kappa),
        delta=0.0,
        bound_on_tail=kappa,
        name=f"const({kappa:g})",
    )


def log_modulus(knot: float = DEFAULT_KNOT, scale: float = 1.0) -> ModulusFn:
    """scale * log(1/r) for r <= knot, frozen at scale * log(1/knot) beyond."""
    if not 0.0 < knot < 1.0:
        raise ArgumentError(f"log modulus knot must lie in (0, 1), got {knot}")
    floor = scale * math.log(1.0 / knot)

    def evaluate(r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        inner = np.where(r > 0, r, knot)
        return np.where(r <= knot, scale * np.log(1.0 / inner), floor)

    return ModulusFn(evaluate=evaluate, delta=float(scale), bound_on_tail=floor,
                     name=f"log(knot={knot:.4g}, scale={scale:g})")


@dataclass(frozen=True)
class ModulusReport:
    positive: bool
    continuous: bool
    tail_bounded: bool
    observed_delta: Mapping[float, float]
    delta_ok: bool

    @property
    def passed(self) -> bool:
        return self.positive and self.continuous and self.tail_bounded and self.delta_ok


def check_modulus_fn(gamma: ModulusFn, n_grid: int = 2001) -> ModulusReport:
    """Check positivity, grid continuity, the tail bound and the delta limit of a modulus."""
    coarse = np.logspace(-9, 2, n_grid)
    fine = np.logspace(-9, 2, 4 * (n_grid - 1) + 1)
    values = gamma(fine)
    positive = bool(np.all(values > 0))
    jump_coarse = float(np.max(np.abs(np.diff(gamma(coarse)))))
    jump_fine = float(np.max(np.abs(np.diff(values))))
    continuous = jump_fine <= 0.5 * jump_coarse + 1e-12
    tail = fine[fine >= 1.0]
    tail_bounded = bool(np.all(gamma(tail) <= gamma.bound_on_tail * (1 + 1e-12)))
    observed = {x: float(gamma(np.array([x]))[0] / math.log(1.0 / x)) for x in (1e-3, 1e-6, 1e-9)}
    if gamma.delta > 0:
        delta_ok = abs(observed[1e-9] - gamma.delta) <= 0.05 * gamma.delta
    else:
        delta_ok = abs(observed[1e-9]) <= 0.05
    return ModulusReport(positive, continuous, tail_bounded, MappingProxyType(observed), delta_ok)


@dataclass(frozen=True)
class ProductForm:
    """Exact factorisation f(x, y) = sum_k left(x)[..., k, ...] * right(y)[..., k, ...]."""

    left: ArrayFn
    right: ArrayFn


@dataclass(frozen=True)
class KernelPair:
    name: str
    dim: int
    drift: PairFn
    diffusion: PairFn
    growth_c0: float
    lambda1: float
    lambda2: float
    gamma1: ModulusFn
    gamma2: ModulusFn
    params: Mapping[str, Any] = field(default_factory=dict)
    drift_form: Optional[ProductForm] = None
    diffusion_form: Optional[ProductForm] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ArgumentError(f"kernel dimension must be positive, got {self.dim}")
        for label in ("growth_c0", "lambda1", "lambda2"):
            if not getattr(self, label) > 0:
                raise ArgumentError(f"{label} must be positive")
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))


def _point(kernel: KernelPair, x: Any, label: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.shape != (kernel.dim,):
        raise ArgumentError(f"{label} must be a point in R^{kernel.dim}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{label} is not finite")
    return arr


def eval_drift(kernel: KernelPair, x: Any, y: Any) -> np.ndarray:
    return kernel.drift(_point(kernel, x, "x"), _point(kernel, y, "y"))


def eval_diffusion(kernel: KernelPair, x: Any, y: Any) -> np.ndarray:
    return kernel.diffusion(_point(kernel, x, "x"), _point(kernel, y, "y"))


def _batch(kernel: KernelPair, x: Any) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    if arr.ndim <= 1:
        return _point(kernel, arr, "x")[None, :], True
    if arr.ndim != 2 or arr.shape[1] != kernel.dim:
        raise ArgumentError(f"x must be a point or an (n, {kernel.dim}) batch, got shape {arr.shape}")
    return arr, False


def _product_average(form: ProductForm, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    right = compensated_mean(form.right(ys), axis=0)
    left = form.left(xs)
    acc = left[:, 0] * right[0]
    for k in range(1, right.shape[0]):
        acc = acc + left[:, k] * right[k]
    return acc


def _pairwise_average(fn: PairFn, xs: np.ndarray, ys: np.ndarray, out_shape: tuple, workers: int) -> np.ndarray:
    n, m = xs.shape[0], ys.shape[0]
    result = np.empty((n,) + out_shape)
    rows = max(1, _CHUNK_ELEMENTS // (m * int(np.prod(out_shape))))
    chunks = [slice(i, min(i + rows, n)) for i in range(0, n, rows)]

    def work(sl: slice) -> None:
        terms = fn(xs[sl, None, :], ys[None, :, :])
        result[sl] = compensated_mean(np.moveaxis(terms, 1, -1), axis=-1)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(work, chunks))
    else:
        for sl in chunks:
            work(sl)
    return result


def _mean_field(kernel: KernelPair, x: Any, measure: Any, which: str, workers: int) -> np.ndarray:
    ys = as_points(measure)
    if ys.shape[1] != kernel.dim:
        raise ArgumentError(f"measure lives in R^{ys.shape[1]}, kernel in R^{kernel.dim}")
    xs, single = _batch(kernel, x)
    d = kernel.dim
    if which == "drift":
        form, fn, out_shape = kernel.drift_form, kernel.drift, (d,)
    else:
        form, fn, out_shape = kernel.diffusion_form, kernel.diffusion, (d, d)
    if form is not None:
        out = _product_average(form, xs, ys)
    else:
        out = _pairwise_average(fn, xs, ys, out_shape, workers)
    return out[0] if single else out


def mean_field_drift(kernel: KernelPair, x: Any, measure: Any, workers: int = 1) -> np.ndarray:
    """(1/N) sum_j b(x, y_j) for a point x of shape (d,) or a batch (n, d)."""
    return _mean_field(kernel, x, measure, "drift", workers)


def mean_field_diffusion(kernel: KernelPair, x: Any, measure: Any, workers: int = 1) -> np.ndarray:
    return _mean_field(kernel, x, measure, "diffusion", workers)


# ---------------------------------------------------------------------------
# Catalog

def _batch_shape(x: np.ndarray, y: np.ndarray) -> tuple:
    return np.broadcast_shapes(x.shape[:-1], y.shape[:-1])


def _constant_diffusion(s: float, d: int) -> tuple[PairFn, ProductForm]:
    eye = s * np.eye(d)

    def diffusion(x, y):
        return np.broadcast_to(eye, _batch_shape(x, y) + (d, d)).copy()

    form = ProductForm(
        left=lambda x: np.broadcast_to(eye, x.shape[:-1] + (1, d, d)).copy(),
        right=lambda y: np.ones(y.shape[:-1] + (1, 1, 1)),
    )
    return diffusion, form


def _glued(u: np.ndarray, knot: float, power: float) -> np.ndarray:
    """u * log(1/|u|)**power inside the knot, u * log(1/knot)**power outside, 0 at u = 0."""
    r = np.linalg.norm(u, axis=-1, keepdims=True)
    safe = np.where(r > 0, np.minimum(r, knot), knot)
    inner = np.log(1.0 / safe) ** power
    outer = math.log(1.0 / knot) ** power
    factor = np.where(r <= knot, inner, outer)
    return np.where(r > 0, u * factor, 0.0)


def linear(a: float = -1.0, c: float = 0.5, s: float = 0.2, d: int = 1) -> KernelPair:
    """b(x, y) = a x + c y, sigma = s I: the exact-oracle kernel."""
    a, c, s, d = float(a), float(c), float(s), int(d)
    diffusion, diffusion_form = _constant_diffusion(s, d)
    drift_form = ProductForm(
        left=lambda x: np.stack([a * x, np.full(x.shape, c)], axis=-2),
        right=lambda y: np.stack([np.ones(y.shape), y], axis=-2),
    )
    lam1 = max(abs(a), abs(c)) or 1.0
    return KernelPair(
        name="linear",
        dim=d,
        drift=lambda x, y: a * x + c * y,
        diffusion=diffusion,
        growth_c0=max(abs(a), abs(c), abs(s) * math.sqrt(d)) or 1.0,
        lambda1=lam1,
        lambda2=1.0,
        gamma1=constant_modulus(1.0),
        gamma2=constant_modulus(1.0),
        params={"a": a, "c": c, "s": s, "d": d},
        drift_form=drift_form,
        diffusion_form=diffusion_form,
    )


def zero(d: int = 1) -> KernelPair:
    return replace(linear(a=0.0, c=0.0, s=0.0, d=d), name="zero", params={"d": int(d)})


def kuramoto(kappa: float = 1.0, s: float = 0.5, d: int = 1) -> KernelPair:
    """b(x, y) = kappa sin(y - x) componentwise, sigma = s I."""
    kappa, s, d = float(kappa), float(s), int(d)
    diffusion, diffusion_form = _constant_diffusion(s, d)
    drift_form = ProductForm(
        left=lambda x: kappa * np.stack([np.cos(x), -np.sin(x)], axis=-2),
        right=lambda y: np.stack([np.sin(y), np.cos(y)], axis=-2),
    )
    return KernelPair(
        name="kuramoto",
        dim=d,
        drift=lambda x, y: kappa * np.sin(y - x),
        diffusion=diffusion,
        growth_c0=(abs(kappa) + abs(s)) * math.sqrt(d) or 1.0,
        lambda1=abs(kappa) or 1.0,
        lambda2=1.0,
        gamma1=constant_modulus(1.0),
        gamma2=constant_modulus(1.0),
        params={"kappa": kappa, "s": s, "d": d},
        drift_form=drift_form,
        diffusion_form=diffusion_form,
    )


def loglip(u0: float = DEFAULT_KNOT, s: float = 0.5, d: int = 1) -> KernelPair:
    """b(x, y) = f(x - y) with f(u) = u log(1/|u|) glued linearly beyond |u| = u0."""
    u0, s, d = float(u0), float(s), int(d)
    if not 0.0 < u0 < math.exp(-1.0):
        raise ArgumentError(f"u0 must lie in (0, 1/e), got {u0}")
    diffusion, diffusion_form = _constant_diffusion(s, d)
    slope = math.log(1.0 / u0)
    return KernelPair(
        name="loglip",
        dim=d,
        drift=lambda x, y: _glued(x - y, u0, 1.0),
        diffusion=diffusion,
        growth_c0=slope + abs(s) * math.sqrt(d),
        lambda1=2.0,
        lambda2=1.0,
        gamma1=log_modulus(u0),
        gamma2=constant_modulus(1.0),
        params={"u0": u0, "s": s, "d": d},
        diffusion_form=diffusion_form,
    )


def loglip_diffusion(u0: float = DEFAULT_KNOT, s0: float = 0.5, kappa: float = 0.5, d: int = 1) -> KernelPair:
    """loglip drift with sigma(x, y) = s0 I + kappa diag(u sqrt(log(1/|u|))), u = x - y, glued at u0."""
    u0, s0, kappa, d = float(u0), float(s0), float(kappa), int(d)
    if not 0.0 < u0 < math.exp(-1.0):
        raise ArgumentError(f"u0 must lie in (0, 1/e), got {u0}")
    slope = math.log(1.0 / u0)
    eye = np.eye(d)

    def diffusion(x, y):
        g = _glued(x - y, u0, 0.5)
        return s0 * eye + kappa * g[..., :, None] * eye

    return KernelPair(
        name="loglip-diffusion",
        dim=d,
        drift=lambda x, y: _glued(x - y, u0, 1.0),
        diffusion=diffusion,
        growth_c0=slope + abs(s0) * math.sqrt(d) + abs(kappa) * math.sqrt(slope),
        lambda1=2.0,
        lambda2=4.0 * kappa * kappa or 1.0,
        gamma1=log_modulus(u0),
        gamma2=log_modulus(u0),
        params={"u0": u0, "s0": s0, "kappa": kappa, "d": d},
    )


CATALOG: Mapping[str, Callable[..., KernelPair]] = MappingProxyType({
    "zero": zero,
    "linear": linear,
    "kuramoto": kuramoto,
    "loglip": loglip,
    "loglip-diffusion": loglip_diffusion,
})


def build_kernel(name: str, params: Optional[Mapping[str, Any]] = None) -> KernelPair:
    factory = CATALOG.get(name)
    if factory is None:
        raise ConfigError(f"unknown kernel '{name}' (known: {', '.join(CATALOG)})")
    params = dict(params or {})
    accepted = set(inspect.signature(factory).parameters)
    unknown = sorted(set(params) - accepted)
    if unknown:
        raise ConfigError(f"kernel '{name}' has no parameter(s) {unknown} (accepted: {sorted(accepted)})")
    try:
        return factory(**params)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"kernel '{name}': {e}") from e


# ---------------------------------------------------------------------------
# Sampling-based condition validation

Sampler = Callable[[np.random.Generator, int], np.ndarray]


def gaussian_sampler(scale: float = 3.0, dim: int = 1) -> Sampler:
    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        return scale * rng.standard_normal((n, dim))
    return sample


@dataclass(frozen=True)
class ValidationReport:
    kernel: str
    n_samples: int
    growth_ratio: float
    drift_ratio: float
    diffusion_ratio: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return max(self.growth_ratio, self.drift_ratio, self.diffusion_ratio) <= 1.0 + self.tolerance

    def as_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "n_samples": self.n_samples,
            "growth_ratio": self.growth_ratio,
            "drift_ratio": self.drift_ratio,
            "diffusion_ratio": self.diffusion_ratio,
            "passed": self.passed,
        }


def _ratio(lhs: np.ndarray, rhs: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), np.where(lhs > 0, np.inf, 0.0))
    return float(np.max(r)) if r.size else 0.0


def _perturb(rng: np.random.Generator, base: np.ndarray, fresh: np.ndarray) -> np.ndarray:
    n, d = base.shape
    half = n // 2
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = 10.0 ** rng.uniform(-9.0, 1.0, size=(n, 1))
    out = fresh.copy()
    out[:half] = base[:half] + radius[:half] * direction[:half]
    return out


def validate_conditions(
    kernel: KernelPair,
    sampler: Optional[Sampler] = None,
    n_samples: int = 10000,
    tolerance: float = 1e-9,
    seed: int = 0,
) -> ValidationReport:
    """Largest observed ratio of each (H1)/(H2) inequality over sampled arguments."""
    if n_samples < 1:
        raise ArgumentError("n_samples must be >= 1")
    sampler = sampler or gaussian_sampler(dim=kernel.dim)
    rng = np.random.default_rng(seed)
    x1, y1 = sampler(rng, n_samples), sampler(rng, n_samples)
    x2 = _perturb(rng, x1, sampler(rng, n_samples))
    y2 = _perturb(rng, y1, sampler(rng, n_samples))

    b1, b2 = kernel.drift(x1, y1), kernel.drift(x2, y2)
    s1, s2 = kernel.diffusion(x1, y1), kernel.diffusion(x2, y2)

    nx, ny = np.linalg.norm(x1, axis=1), np.linalg.norm(y1, axis=1)
    growth = np.linalg.norm(b1, axis=1) + np.linalg.norm(s1, axis=(1, 2))
    growth_ratio = _ratio(growth, kernel.growth_c0 * (1.0 + nx + ny))

    dx, dy = np.linalg.norm(x1 - x2, axis=1), np.linalg.norm(y1 - y2, axis=1)
    drift_lhs = np.linalg.norm(b1 - b2, axis=1)
    drift_rhs = kernel.lambda1 * (kernel.gamma1.times(dx) + kernel.gamma1.times(dy))
    diff_lhs = np.sum((s1 - s2) ** 2, axis=(1, 2))
    diff_rhs = kernel.lambda2 * (kernel.gamma2.times(dx, 2) + kernel.gamma2.times(dy, 2))

    report = ValidationReport(
        kernel=kernel.name,
        n_samples=n_samples,
        growth_ratio=growth_ratio,
        drift_ratio=_ratio(drift_lhs, drift_rhs),
        diffusion_ratio=_ratio(diff_lhs, diff_rhs),
        tolerance=tolerance,
    )
    logger.info("validated %s: %s", kernel.name, report.as_dict())
    return report
