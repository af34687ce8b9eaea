"""Desk-scale acceptance runs over the shipped reproduce configs. Run with ``pytest -m slow``."""

import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mvsde.analysis import MonteCarloEstimate, chi2_variance_band, within_standard_errors
from mvsde.config import ComponentSpec, load_config
from mvsde.experiments import (
    run_centered_stats,
    run_chaos,
    run_euler_rate,
    run_increments,
    run_moments,
    run_picard,
    run_validate_kernel,
)
from mvsde.kernels import CATALOG, linear
from mvsde.paths import TimeGrid, derive_seed, generate_bundle, sample_initial
from mvsde.picard import analytic_linear_flow
from mvsde.report import write_result
from mvsde.simulator import euler_interacting, euler_limit_particles

pytestmark = pytest.mark.slow

REPRODUCE = Path(__file__).resolve().parents[1] / "data" / "reproduce"


def _load(name, **overrides):
    return load_config(REPRODUCE / f"{name}.ini", overrides)


def _ou_variance(v0, a, s, t):
    return v0 * math.exp(2 * a * t) + s * s * math.expm1(2 * a * t) / (2 * a)


def test_linear_cloud_mean_and_variance_match_closed_form():
    a, c, s, m0, v0 = -1.0, 0.5, 0.2, 1.0, 0.04
    kernel = linear(a=a, c=c, s=s)
    grid = TimeGrid.from_step(1.0, 2.0 ** -10)
    means, variances = [], []
    for r in range(32):
        seed = derive_seed(7, r)
        init = sample_initial(seed, "gaussian", {"mean": m0, "cov": v0}, 2000, 1)
        final = euler_interacting(kernel, init, generate_bundle(seed, 2000, 1, grid), grid).states[-1, :, 0]
        means.append(final.mean())
        variances.append(final.var(ddof=1))
    exact_var = _ou_variance(v0, a, s, 1.0)
    assert within_standard_errors(MonteCarloEstimate.from_values(means), m0 * math.exp(a + c), 3.0)
    assert within_standard_errors(MonteCarloEstimate.from_values(variances), exact_var, 3.0, slack=1e-4)


def test_ou_variance_against_direct_simulation():
    a, s, v0, n = -1.0, 0.2, 0.04, 10 ** 6
    rng = np.random.default_rng(2024)
    h = 2.0 ** -10
    y = rng.normal(0.0, math.sqrt(v0), n)
    for _ in range(1024):
        y += a * y * h + s * math.sqrt(h) * rng.standard_normal(n)
    lo, hi = chi2_variance_band(_ou_variance(v0, a, s, 1.0), n)
    # relative Euler bias at h = 2^-10 stays below 2e-3
    assert lo * (1 - 2e-3) <= y.var(ddof=1) <= hi * (1 + 2e-3)


def test_limit_particles_match_closed_form_second_moment():
    a, c, s, m0, v0 = -1.0, 0.5, 0.2, 1.0, 0.04
    law = {"mean": m0, "cov": v0}
    kernel = linear(a=a, c=c, s=s)
    grid = TimeGrid.from_step(1.0, 2.0 ** -10)
    flow = analytic_linear_flow(kernel, "gaussian", law, grid, M_law=4000, seed=1)
    init = sample_initial(11, "gaussian", law, 20000, 1)
    final = euler_limit_particles(kernel, init, generate_bundle(11, 20000, 1, grid), grid, flow).states[-1, :, 0]
    exact = _ou_variance(v0, a, s, 1.0) + (m0 * math.exp(a + c)) ** 2
    assert within_standard_errors(MonteCarloEstimate.from_values(final ** 2), exact, 3.0, slack=1e-3)


def test_chaos_rate_for_linear_kernel():
    result = run_chaos(_load("chaos_linear"))
    assert -1.35 <= result.summary["slope"] <= -0.65
    assert result.checks["n_times_error_ratio"]


@pytest.mark.parametrize("name", ["euler_rate_linear", "euler_rate_loglip"])
def test_euler_envelope(name):
    result = run_euler_rate(_load(name))
    assert result.checks["alpha_envelope"]
    if name == "euler_rate_linear":
        assert result.checks["slope_band"]


def test_moments_are_uniform_in_n():
    result = run_moments(_load("moments_linear"))
    assert abs(result.summary["slope"]) <= 0.1
    assert not result.failed_checks, result.checks


def test_increments_are_linear_in_lag():
    result = run_increments(_load("increments_linear"))
    assert 0.9 <= result.summary["slope"] <= 1.1


def test_centered_kernel_orthogonality_and_variance():
    result = run_centered_stats(_load("centered_stats_linear"))
    assert result.checks["drift_orthogonality"]
    assert result.checks["drift_variance_matches"]


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_picard_converges_for_catalog_kernels(name):
    cfg = replace(_load("picard_linear"), kernel=ComponentSpec(name, {}))
    result = run_picard(cfg)
    gaps = result.summary["picard"]["gap_history"]
    assert result.checks["converged"]
    assert len(gaps) <= 30
    assert all(b <= a for a, b in zip(gaps[1:], gaps[2:]))


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_validate_reproduce_configs(name):
    if name == "zero":
        cfg = replace(_load("validate_linear"), kernel=ComponentSpec("zero", {}))
    else:
        cfg = _load(f"validate_{name}")
    result = run_validate_kernel(cfg)
    assert not result.failed_checks, result.checks


def test_reproduce_outputs_are_thread_independent(tmp_path):
    for name in ("chaos_linear", "moments_linear"):
        outputs = []
        for threads in (1, 4):
            cfg = _load(name, threads=threads, out=str(tmp_path / f"t{threads}"))
            runner = run_chaos if name.startswith("chaos") else run_moments
            outputs.append(write_result(runner(cfg), cfg).read_bytes())
        assert outputs[0] == outputs[1]


def test_picard_flow_mean_matches_linear_ode():
    result = run_picard(_load("picard_linear"))
    mean_t = np.array(result.summary["mean_T"])
    exact = np.array(result.summary["mean_T_exact"])
    # Euler bias at h = 2^-9 plus Monte Carlo error of 4000 samples
    assert np.all(np.abs(mean_t - exact) <= 4 * 0.15 / math.sqrt(4000) + 1e-3)
