"""Experiment runners: one per convergence or regularity property, each returning an ExperimentResult.

Every runner fans replications out over a thread pool. Replication ``r`` draws
all its randomness from ``derive_seed(seed, r)``, so results do not depend on
the number of threads.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .analysis import (
    MonteCarloEstimate,
    alpha_envelope_check,
    check_modulus_domination,
    fit_combined_rate,
    fit_rate,
    within_standard_errors,
)
from .config import ExperimentConfig
from .kernels import KernelPair, build_kernel, check_modulus_fn, validate_conditions
from .paths import TimeGrid, derive_seed, generate_bundle, law_moments, sample_initial
from .picard import (
    LawFlow,
    LawFlowCache,
    PicardReport,
    analytic_linear_flow,
    picard_solve,
    self_consistency,
)
from .simulator import (
    centered_kernel_stats,
    coupled_chaos_error,
    coupled_overall_error,
    euler_interacting,
    euler_limit_particles,
    reference_interacting,
)

logger = logging.getLogger(__name__)

DEFAULT_BANDS = {
    "chaos": (-1.35, -0.65),
    "moments": (-0.1, 0.1),
    "increments": (0.9, 1.1),
}
DEFAULT_RATIO = {"chaos": 4.0, "moments": 3.0, "picard": 3.0}


@dataclass
class ExperimentResult:
    name: str
    rows: list[dict] = field(default_factory=list)
    tables: dict[str, list[dict]] = field(default_factory=dict)
    raw: dict[str, list[float]] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    timings: list[dict] = field(default_factory=list)
    paths: dict[str, np.ndarray] = field(default_factory=dict)

    def add_estimate(self, param: Any, values: Sequence[float], raw_name: str, table: Optional[str] = None) -> MonteCarloEstimate:
        est = MonteCarloEstimate.from_values(values)
        raw_file = f"raw/{raw_name}.csv"
        self.raw[raw_file] = [float(v) for v in est.values]
        row = {
            "param": param,
            "estimate": est.mean,
            "stderr": est.stderr,
            "replications": est.n,
            "raw_file": raw_file,
        }
        (self.tables.setdefault(table, []) if table else self.rows).append(row)
        return est

    @property
    def failed_checks(self) -> list[str]:
        return [name for name, ok in self.checks.items() if not ok]


# ---------------------------------------------------------------------------
# Plumbing

def _replicate(cfg: ExperimentConfig, work: Callable[[int], Any], desc: str) -> list:
    """Run ``work(r)`` for every replication; results come back in replication order."""
    slots: list = [None] * cfg.replications
    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as ex:
        futs = {ex.submit(work, r): r for r in range(cfg.replications)}
        for f in tqdm(as_completed(futs), total=len(futs), desc=desc, leave=False):
            slots[futs[f]] = f.result()
    return slots


def _inner_workers(cfg: ExperimentConfig) -> int:
    return cfg.threads if cfg.replications == 1 else 1


def _kernel(cfg: ExperimentConfig) -> KernelPair:
    return build_kernel(cfg.kernel.name, cfg.kernel.params)


def _inputs(cfg: ExperimentConfig, kernel: KernelPair, seed: int, n: int, grid: TimeGrid):
    init = sample_initial(seed, cfg.initial_law.name, cfg.initial_law.params, n, kernel.dim)
    streaming = 8 * n * grid.n_steps * kernel.dim > cfg.memory_budget
    bundle = generate_bundle(seed, n, kernel.dim, grid, streaming=streaming, memory_budget=cfg.memory_budget)
    return init, bundle


def law_flow(cfg: ExperimentConfig, kernel: KernelPair, grid: TimeGrid) -> tuple[LawFlow, Optional[PicardReport]]:
    """The reference limit law on ``grid``: analytic for the linear kernel, else Picard (cached if configured)."""
    law = cfg.initial_law
    if cfg.law_source == "analytic":
        return analytic_linear_flow(kernel, law.name, law.params, grid, cfg.M_law, cfg.seed), None
    args = (kernel, law.name, law.params, grid, cfg.M_law, cfg.tol, cfg.max_iter, cfg.seed, cfg.threads)
    print(f"[i] Solving the limit law by Picard iteration (M_law={cfg.M_law}, tol={cfg.tol:g})")
    if cfg.cache_dir:
        return LawFlowCache(cfg.cache_dir).solve(*args)
    return picard_solve(*args)


def _record_slope(result: ExperimentResult, xs: Sequence[float], estimates: Sequence[float], band: Optional[tuple]) -> None:
    xs, estimates = list(xs), list(estimates)
    if all(e == 0 for e in estimates):
        result.summary["degenerate"] = True
        result.summary["slope"] = None
        return
    if len(xs) < 3 or any(e <= 0 for e in estimates):
        return
    fit = fit_rate(xs, estimates)
    result.summary.update(slope=fit.slope, intercept=fit.intercept, r_squared=fit.r_squared, slope_stderr=fit.stderr)
    if band is not None:
        result.checks["slope_band"] = band[0] <= fit.slope <= band[1]


def _record_ratio(result: ExperimentResult, values: Sequence[float], limit: Optional[float], label: str) -> None:
    values = [v for v in values if v > 0]
    if len(values) < 2:
        return
    ratio = max(values) / min(values)
    result.summary[f"{label}_ratio"] = ratio
    if limit is not None:
        result.checks[f"{label}_ratio"] = ratio <= limit


def _timing(result: ExperimentResult, param: Any, seconds: float) -> None:
    result.timings.append({"param": param, "seconds": seconds})


# ---------------------------------------------------------------------------
# Runners

def run_chaos(cfg: ExperimentConfig) -> ExperimentResult:
    """Sup-square distance between interacting and limit particles on shared noise, per N."""
    kernel = _kernel(cfg)
    grid = cfg.fine_grid
    flow, report = law_flow(cfg, kernel, grid)
    Ns = list(cfg.N_list or (cfg.N,))
    workers = _inner_workers(cfg)
    dumped: dict[str, np.ndarray] = {}

    def work(r: int):
        seed = derive_seed(cfg.seed, r)
        out, secs = [], []
        for n in Ns:
            t0 = time.perf_counter()
            init, bundle = _inputs(cfg, kernel, seed, n, grid)
            err = coupled_chaos_error(kernel, init, bundle, grid, flow, workers)
            out.append(err.mean)
            secs.append(time.perf_counter() - t0)
            if r == 0 and cfg.dump_paths and n == Ns[-1]:
                dumped[f"chaos_N{n}_interacting"] = err.interacting.states
                dumped[f"chaos_N{n}_limit"] = err.limit.states
        return out, secs

    slots = _replicate(cfg, work, f"chaos {kernel.name}")
    result = ExperimentResult("chaos", paths=dumped)
    if report is not None:
        result.summary["picard"] = report.as_dict()
    estimates = []
    for j, n in enumerate(Ns):
        values = [s[0][j] for s in slots]
        est = result.add_estimate(n, values, f"chaos_N{n}")
        result.add_estimate(n, [n * v for v in values], f"chaos_scaled_N{n}", table="n_times_error")
        estimates.append(est.mean)
        _timing(result, n, sum(s[1][j] for s in slots))
    result.summary["estimates"] = dict(zip(map(str, Ns), estimates))
    _record_slope(result, Ns, estimates, cfg.slope_band or DEFAULT_BANDS["chaos"])
    if not result.summary.get("degenerate") and "slope" in result.summary:
        _record_ratio(result, [n * e for n, e in zip(Ns, estimates)], cfg.ratio_limit or DEFAULT_RATIO["chaos"], "n_times_error")
    return result


def run_euler_rate(cfg: ExperimentConfig) -> ExperimentResult:
    """Coarse-h interacting Euler against the finest-grid run on the same paths, per h."""
    kernel = _kernel(cfg)
    fine = cfg.fine_grid
    hs = sorted(set(cfg.h_list) | {cfg.h_fine}, reverse=True)
    workers = _inner_workers(cfg)
    dumped: dict[str, np.ndarray] = {}

    def work(r: int):
        seed = derive_seed(cfg.seed, r)
        t0 = time.perf_counter()
        init, bundle = _inputs(cfg, kernel, seed, cfg.N, fine)
        ref = reference_interacting(kernel, init, bundle, fine, workers)
        out, secs = [], []
        for h in hs:
            t1 = time.perf_counter()
            grid = cfg.grid_for(h)
            traj = ref if grid == fine else euler_interacting(kernel, init, bundle, grid, workers)
            out.append(float(np.mean(traj.sup_square(ref))))
            secs.append(time.perf_counter() - t1)
            if r == 0 and cfg.dump_paths:
                dumped[f"euler_h{grid.n_steps}"] = traj.states
        secs[-1] += time.perf_counter() - t0 - sum(secs)
        return out, secs

    slots = _replicate(cfg, work, f"euler-rate {kernel.name}")
    result = ExperimentResult("euler-rate", paths=dumped)
    estimates = []
    for j, h in enumerate(hs):
        est = result.add_estimate(h, [s[0][j] for s in slots], f"euler_M{cfg.grid_for(h).n_steps}")
        estimates.append(est.mean)
        _timing(result, h, sum(s[1][j] for s in slots))
    coarse = [(h, e) for h, e in zip(hs, estimates) if h > cfg.h_fine and e > 0]
    result.summary["fine_error"] = estimates[-1]
    result.summary["fitted_h"] = [h for h, _ in coarse]
    if coarse:
        _record_slope(result, [h for h, _ in coarse], [e for _, e in coarse], cfg.slope_band)
    if len(coarse) >= 2:
        ok = alpha_envelope_check([h for h, _ in coarse], [e for _, e in coarse], cfg.alpha, cfg.envelope_tolerance)
        result.summary["alpha"] = cfg.alpha
        result.checks["alpha_envelope"] = ok
    return result


def run_moments(cfg: ExperimentConfig) -> ExperimentResult:
    """E sup_t |X^{N,i}_t|^2 per N on the finest grid, and per h at the largest N.

    Per h the limit particles are also run against a law flow solved on that grid.
    """
    kernel = _kernel(cfg)
    fine = cfg.fine_grid
    Ns = list(cfg.N_list or (cfg.N,))
    hs = sorted(set(cfg.h_list), reverse=True)
    workers = _inner_workers(cfg)
    flows = [law_flow(cfg, kernel, cfg.grid_for(h))[0] for h in hs]

    def work(r: int):
        seed = derive_seed(cfg.seed, r)
        by_n, by_h, by_limit, secs = [], [], [], []
        for n in Ns:
            t0 = time.perf_counter()
            init, bundle = _inputs(cfg, kernel, seed, n, fine)
            by_n.append(float(np.mean(euler_interacting(kernel, init, bundle, fine, workers).sup_square())))
            secs.append(time.perf_counter() - t0)
        if hs:
            init, bundle = _inputs(cfg, kernel, seed, Ns[-1], fine)
        for h, flow in zip(hs, flows):
            grid = cfg.grid_for(h)
            by_h.append(float(np.mean(euler_interacting(kernel, init, bundle, grid, workers).sup_square())))
            traj = euler_limit_particles(kernel, init, bundle, grid, flow, workers)
            by_limit.append(float(np.mean(traj.sup_square())))
        return by_n, by_h, by_limit, secs

    slots = _replicate(cfg, work, f"moments {kernel.name}")
    result = ExperimentResult("moments")
    estimates = []
    for j, n in enumerate(Ns):
        estimates.append(result.add_estimate(n, [s[0][j] for s in slots], f"moments_N{n}").mean)
        _timing(result, n, sum(s[3][j] for s in slots))
    by_h = [result.add_estimate(h, [s[1][j] for s in slots], f"moments_M{cfg.grid_for(h).n_steps}", table="moments_by_h").mean
            for j, h in enumerate(hs)]
    by_limit = [result.add_estimate(h, [s[2][j] for s in slots], f"limit_moments_M{cfg.grid_for(h).n_steps}",
                                    table="limit_moments_by_h").mean
                for j, h in enumerate(hs)]
    _record_slope(result, Ns, estimates, cfg.slope_band or DEFAULT_BANDS["moments"])
    limit = cfg.ratio_limit or DEFAULT_RATIO["moments"]
    _record_ratio(result, estimates, limit, "moment")
    _record_ratio(result, by_h, limit, "moment_by_h")
    _record_ratio(result, by_limit, limit, "limit_moment_by_h")
    return result


def _increment_moment(states: np.ndarray, lag: int) -> float:
    diff = states[lag:] - states[:-lag]
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def run_increments(cfg: ExperimentConfig) -> ExperimentResult:
    """E|X_t - X_s|^2 against t - s over the configured lags, averaged over windows and particles."""
    kernel = _kernel(cfg)
    fine = cfg.fine_grid
    lags = list(cfg.lags)
    workers = _inner_workers(cfg)

    def work(r: int):
        init, bundle = _inputs(cfg, kernel, derive_seed(cfg.seed, r), cfg.N, fine)
        states = euler_interacting(kernel, init, bundle, fine, workers).states
        return [_increment_moment(states, lag) for lag in lags]

    t0 = time.perf_counter()
    slots = _replicate(cfg, work, f"increments {kernel.name}")
    result = ExperimentResult("increments")
    taus = [lag * cfg.h_fine for lag in lags]
    estimates = [result.add_estimate(tau, [s[j] for s in slots], f"increments_lag{lag}").mean
                 for j, (lag, tau) in enumerate(zip(lags, taus))]
    _timing(result, "all", time.perf_counter() - t0)
    _record_slope(result, taus, estimates, cfg.slope_band or DEFAULT_BANDS["increments"])
    return result


def run_centered_stats(cfg: ExperimentConfig) -> ExperimentResult:
    """Orthogonality and variance of the centered kernels over i.i.d. limit particles at time T."""
    kernel = _kernel(cfg)
    grid = cfg.fine_grid
    flow, report = law_flow(cfg, kernel, grid)
    workers = _inner_workers(cfg)

    def work(r: int):
        init, bundle = _inputs(cfg, kernel, derive_seed(cfg.seed, r), cfg.N, grid)
        traj = euler_limit_particles(kernel, init, bundle, grid, flow, workers)
        return centered_kernel_stats(kernel, traj, flow, workers=workers)

    t0 = time.perf_counter()
    slots = _replicate(cfg, work, f"centered-stats {kernel.name}")
    result = ExperimentResult("centered-stats")
    if report is not None:
        result.summary["picard"] = report.as_dict()
    band = 4.0 / math.sqrt(cfg.replications)
    for label in ("drift", "diffusion"):
        corr = result.add_estimate(f"{label}_correlation", [getattr(s, f"{label}_correlation") for s in slots],
                                   f"{label}_correlation")
        result.add_estimate(f"{label}_variance", [getattr(s, f"{label}_variance") for s in slots], f"{label}_variance")
        result.add_estimate(f"{label}_n_times_variance",
                            [cfg.N * getattr(s, f"{label}_variance") for s in slots], f"{label}_n_times_variance")
        result.checks[f"{label}_orthogonality"] = abs(corr.mean) <= band
    result.summary["correlation_band"] = band
    if kernel.name == "linear":
        c = float(kernel.params["c"])
        expected = c * c * float(np.sum(flow.variances()[-1])) / cfg.N
        est = MonteCarloEstimate.from_values([s.drift_variance for s in slots])
        result.summary["drift_variance_expected"] = expected
        result.checks["drift_variance_matches"] = within_standard_errors(est, expected, 3.0)
    _timing(result, "all", time.perf_counter() - t0)
    return result


def run_picard(cfg: ExperimentConfig) -> ExperimentResult:
    kernel = _kernel(cfg)
    grid = cfg.fine_grid
    t0 = time.perf_counter()
    flow, report = law_flow(replace(cfg, law_source="picard"), kernel, grid)
    result = ExperimentResult("picard")
    _timing(result, "solve", time.perf_counter() - t0)
    result.summary["picard"] = report.as_dict()
    for k, (gap, mom) in enumerate(zip(report.gap_history, report.moment_history), start=1):
        result.rows.append({"param": k, "estimate": gap, "stderr": 0.0, "replications": 1, "raw_file": ""})
        result.tables.setdefault("moments", []).append(
            {"param": k, "estimate": mom, "stderr": 0.0, "replications": 1, "raw_file": ""}
        )
    for k, exact in enumerate(report.exact_gap_history, start=1):
        result.tables.setdefault("exact_gaps", []).append(
            {"param": k, "estimate": exact, "stderr": 0.0, "replications": 1, "raw_file": ""}
        )
    if report.exact_gap_history:
        result.checks["exact_gap_within_bound"] = all(
            e <= g * (1 + 1e-9) for e, g in zip(report.exact_gap_history, report.gap_history)
        )
    gaps = report.gap_history
    result.checks["converged"] = report.converged
    result.checks["gap_monotone"] = all(b <= a for a, b in zip(gaps[1:], gaps[2:]))
    moments = report.moment_history
    if moments and moments[0] > 0:
        result.summary["moment_ratio"] = max(moments) / moments[0]
        result.checks["moment_bound"] = max(moments) <= (cfg.ratio_limit or DEFAULT_RATIO["picard"]) * moments[0]
    law = cfg.initial_law
    consistency = self_consistency(kernel, flow, law.name, law.params, seed=cfg.seed, workers=cfg.threads)
    result.summary["self_consistency"] = {"times": consistency.times, "z_scores": consistency.z_scores}
    result.checks["self_consistency"] = consistency.passed
    if kernel.name == "linear":
        m0, _ = law_moments(law.name, law.params, kernel.dim)
        rate = float(kernel.params["a"]) + float(kernel.params["c"])
        result.summary["mean_T"] = flow.means()[-1].tolist()
        result.summary["mean_T_exact"] = (m0 * math.exp(rate * cfg.T)).tolist()
    if cfg.dump_paths:
        result.paths["law_flow"] = flow.points
    return result


def run_validate_kernel(cfg: ExperimentConfig) -> ExperimentResult:
    kernel = _kernel(cfg)
    t0 = time.perf_counter()
    report = validate_conditions(kernel, n_samples=cfg.validation_samples, seed=cfg.seed)
    result = ExperimentResult("validate-kernel")
    for label in ("growth_ratio", "drift_ratio", "diffusion_ratio"):
        result.rows.append({"param": label, "estimate": getattr(report, label), "stderr": 0.0,
                            "replications": report.n_samples, "raw_file": ""})
    result.checks["conditions"] = report.passed
    for label, gamma in (("gamma1", kernel.gamma1), ("gamma2", kernel.gamma2)):
        mod = check_modulus_fn(gamma)
        dom = check_modulus_domination(gamma)
        result.summary[label] = {
            "name": gamma.name,
            "delta": gamma.delta,
            "observed_delta": {f"{x:g}": v for x, v in mod.observed_delta.items()},
            "eta": dom.eta,
        }
        result.checks[f"{label}_modulus"] = mod.passed
        result.checks[f"{label}_domination"] = dom.passed
    result.summary["validation"] = report.as_dict()
    _timing(result, "all", time.perf_counter() - t0)
    return result


def run_overall(cfg: ExperimentConfig) -> ExperimentResult:
    """Coarse-grid interacting particles against fine-grid limit particles over an (N, h) grid."""
    kernel = _kernel(cfg)
    fine = cfg.fine_grid
    flow, report = law_flow(cfg, kernel, fine)
    Ns = list(cfg.N_list or (cfg.N,))
    hs = sorted(set(cfg.h_list or (cfg.h_fine,)), reverse=True)
    workers = _inner_workers(cfg)

    def work(r: int):
        seed = derive_seed(cfg.seed, r)
        out = []
        for n in Ns:
            init, bundle = _inputs(cfg, kernel, seed, n, fine)
            out.extend(coupled_overall_error(kernel, init, bundle, cfg.grid_for(h), flow, workers).mean for h in hs)
        return out

    t0 = time.perf_counter()
    slots = _replicate(cfg, work, f"overall {kernel.name}")
    result = ExperimentResult("overall")
    if report is not None:
        result.summary["picard"] = report.as_dict()
    pts = []
    for j, (n, h) in enumerate((n, h) for n in Ns for h in hs):
        m = cfg.grid_for(h).n_steps
        est = result.add_estimate(f"N={n};h={h!r}", [s[j] for s in slots], f"overall_N{n}_M{m}")
        pts.append((n, h, est.mean))
    _timing(result, "all", time.perf_counter() - t0)
    usable = [p for p in pts if p[2] > 0]
    if len(usable) >= 2:
        fit = fit_combined_rate(*zip(*usable), alpha=cfg.alpha)
        result.summary.update(c_particles=fit.c_particles, c_step=fit.c_step, relative_residual=fit.relative_residual)
    return result


RUNNERS = {
    "chaos": "run_chaos",
    "euler-rate": "run_euler_rate",
    "moments": "run_moments",
    "increments": "run_increments",
    "centered-stats": "run_centered_stats",
    "picard": "run_picard",
    "validate-kernel": "run_validate_kernel",
    "overall": "run_overall",
}
