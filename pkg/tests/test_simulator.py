import math
import warnings

import numpy as np
import pytest

from mvsde.errors import ArgumentError, BlowUpError
from mvsde.kernels import kuramoto, linear, loglip, zero
from mvsde.paths import TimeGrid, generate_bundle, sample_initial
from mvsde.picard import LawFlow, analytic_linear_flow
from mvsde.simulator import (
    centered_kernel_stats,
    coupled_chaos_error,
    coupled_overall_error,
    euler_interacting,
    euler_limit_particles,
    reference_interacting,
)


def _inputs(n, grid, law="gaussian", params=None, seed=0, d=1):
    params = {"mean": 0.0, "cov": 1.0} if params is None else params
    return sample_initial(seed, law, params, n, d), generate_bundle(seed, n, d, grid)


def test_zero_kernel_keeps_initial_state(small_grid):
    init, bundle = _inputs(10, small_grid)
    traj = euler_interacting(zero(), init, bundle, small_grid)
    for k in range(small_grid.n_steps + 1):
        np.testing.assert_array_equal(traj.states[k], init.points)


def test_pure_noise_is_scaled_brownian_sum(small_grid):
    s = 0.6
    init, bundle = _inputs(7, small_grid)
    traj = euler_interacting(linear(a=0.0, c=0.0, s=s), init, bundle, small_grid)
    x = np.array(init.points)
    for k, dw in enumerate(bundle.increments.transpose(1, 0, 2)):
        x = x + s * dw
        np.testing.assert_array_equal(traj.states[k + 1], x)


def test_hand_computed_recursion():
    grid = TimeGrid(1.0, 2)
    init = sample_initial(0, "point_mass", {"x0": 2.0}, 1, 1)
    bundle = generate_bundle(0, 1, 1, grid)
    traj = euler_interacting(linear(a=-1.0, c=0.0, s=0.0), init, bundle, grid)
    np.testing.assert_array_equal(traj.states[:, 0, 0], [2.0, 1.0, 0.5])


def test_limit_particles_against_delta_law_stay_put(small_grid):
    init, bundle = _inputs(5, small_grid)
    law = LawFlow.constant(small_grid, np.zeros((3, 1)))
    traj = euler_limit_particles(linear(a=0.0, c=1.0, s=0.0), init, bundle, small_grid, law)
    np.testing.assert_array_equal(traj.states[-1], init.points)


def test_limit_particles_against_single_point_flow(small_grid):
    kernel = loglip(s=0.4)
    path = np.sin(small_grid.times)[:, None, None]
    law = LawFlow(small_grid, path)
    init, bundle = _inputs(1, small_grid)
    traj = euler_limit_particles(kernel, init, bundle, small_grid, law)
    h = small_grid.step
    x = float(init.points[0, 0])
    for k, dw in enumerate(bundle.increments[0, :, 0]):
        x = x + kernel.drift(np.array([x]), path[k, 0])[0] * h + 0.4 * dw
    assert traj.states[-1, 0, 0] == pytest.approx(x, rel=1e-13, abs=1e-15)


def test_interacting_mean_follows_mean_ode():
    kernel = linear(a=-1.0, c=0.5, s=0.2)
    grid = TimeGrid(1.0, 256)
    init, bundle = _inputs(2000, grid, params={"mean": 1.0, "cov": 0.04})
    final = euler_interacting(kernel, init, bundle, grid).states[-1, :, 0]
    se = final.std(ddof=1) / math.sqrt(final.size)
    assert abs(final.mean() - math.exp(-0.5)) <= 4 * se


def test_y_independent_kernel_has_no_chaos_error(small_grid):
    kernel = linear(a=-1.0, c=0.0, s=0.3)
    init, bundle = _inputs(16, small_grid)
    law = analytic_linear_flow(kernel, "gaussian", {"mean": 0.0, "cov": 1.0}, small_grid, M_law=50)
    err = coupled_chaos_error(kernel, init, bundle, small_grid, law)
    assert err.mean == 0.0
    assert np.all(err.per_particle == 0.0)


def test_single_particle_chaos_error_is_finite_and_positive(small_grid, linear_kernel):
    init, bundle = _inputs(1, small_grid)
    law = analytic_linear_flow(linear_kernel, "gaussian", {"mean": 0.0, "cov": 1.0}, small_grid, M_law=500)
    err = coupled_chaos_error(linear_kernel, init, bundle, small_grid, law)
    assert err.n_particles == 1
    assert 0.0 < err.mean < math.inf


@pytest.mark.parametrize("kernel", [linear(), loglip(), kuramoto()], ids=["linear", "loglip", "kuramoto"])
def test_joint_permutation_permutes_output(small_grid, kernel):
    init, bundle = _inputs(12, small_grid, seed=4)
    perm = np.random.default_rng(0).permutation(12)
    base = euler_interacting(kernel, init, bundle, small_grid)
    permuted = euler_interacting(kernel, init.take(perm), bundle.take(perm), small_grid)
    np.testing.assert_array_equal(permuted.states, base.states[:, perm])


def test_workers_do_not_change_results(small_grid, loglip_kernel):
    init, bundle = _inputs(40, small_grid, seed=2)
    serial = euler_interacting(loglip_kernel, init, bundle, small_grid, workers=1)
    threaded = euler_interacting(loglip_kernel, init, bundle, small_grid, workers=4)
    np.testing.assert_array_equal(serial.states, threaded.states)


def test_streaming_bundle_gives_same_path(small_grid, linear_kernel):
    init = sample_initial(0, "gaussian", {"mean": 0.0, "cov": 1.0}, 6, 1)
    eager = generate_bundle(0, 6, 1, small_grid)
    lazy = generate_bundle(0, 6, 1, small_grid, streaming=True)
    np.testing.assert_array_equal(
        euler_interacting(linear_kernel, init, eager, small_grid).states,
        euler_interacting(linear_kernel, init, lazy, small_grid).states,
    )


def test_blow_up_is_reported():
    grid = TimeGrid(1.0, 2)
    init = sample_initial(0, "point_mass", {"x0": 1.0}, 3, 1)
    bundle = generate_bundle(0, 3, 1, grid)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(BlowUpError) as info:
            euler_interacting(linear(a=1e300, c=0.0, s=0.0), init, bundle, grid)
    assert info.value.step == 2
    assert info.value.particle == 0


def test_inputs_must_agree(small_grid, linear_kernel):
    init, _ = _inputs(4, small_grid)
    bundle = generate_bundle(0, 5, 1, small_grid)
    with pytest.raises(ArgumentError):
        euler_interacting(linear_kernel, init, bundle, small_grid)


def test_limit_particles_need_nested_law(linear_kernel):
    grid = TimeGrid(1.0, 8)
    init, bundle = _inputs(3, grid)
    law = LawFlow.constant(TimeGrid(1.0, 4), np.zeros((2, 1)))
    with pytest.raises(ArgumentError):
        euler_limit_particles(linear_kernel, init, bundle, grid, law)


def test_running_sup_is_monotone(small_grid, linear_kernel):
    init, bundle = _inputs(8, small_grid)
    traj = euler_interacting(linear_kernel, init, bundle, small_grid)
    running = traj.running_sup_square()
    assert np.all(np.diff(running, axis=0) >= 0)
    np.testing.assert_array_equal(traj.sup_square(), running[-1])
    assert traj.cloud(3).time == small_grid.times[3]
    assert len(traj.clouds) == small_grid.n_steps + 1


def test_reference_system_runs_on_finest_grid(linear_kernel):
    fine = TimeGrid(1.0, 32)
    init, bundle = _inputs(4, fine)
    assert reference_interacting(linear_kernel, init, bundle).grid == fine


def test_overall_error_on_finest_grid_equals_chaos_error(linear_kernel):
    fine = TimeGrid(1.0, 32)
    init, bundle = _inputs(8, fine)
    law = analytic_linear_flow(linear_kernel, "gaussian", {"mean": 0.0, "cov": 1.0}, fine, M_law=200)
    chaos = coupled_chaos_error(linear_kernel, init, bundle, fine, law)
    overall = coupled_overall_error(linear_kernel, init, bundle, fine, law)
    np.testing.assert_array_equal(overall.per_particle, chaos.per_particle)
    coarse = coupled_overall_error(linear_kernel, init, bundle, TimeGrid(1.0, 4), law)
    assert coarse.interacting.states.shape[0] == 5
    assert np.isfinite(coarse.mean)


def test_centered_stats_vanish_for_y_independent_kernel(small_grid):
    kernel = linear(a=-1.0, c=0.0, s=0.3)
    init, bundle = _inputs(20, small_grid)
    law = analytic_linear_flow(kernel, "gaussian", {"mean": 0.0, "cov": 1.0}, small_grid, M_law=100)
    traj = euler_limit_particles(kernel, init, bundle, small_grid, law)
    stats = centered_kernel_stats(kernel, traj, law)
    assert stats.drift_correlation == 0.0
    assert stats.drift_variance == 0.0
    assert stats.diffusion_variance == 0.0


def test_centered_drift_variance_of_linear_kernel(small_grid, linear_kernel):
    init, bundle = _inputs(30, small_grid)
    law = analytic_linear_flow(linear_kernel, "gaussian", {"mean": 0.0, "cov": 1.0}, small_grid, M_law=300)
    traj = euler_limit_particles(linear_kernel, init, bundle, small_grid, law)
    stats = centered_kernel_stats(linear_kernel, traj, law)
    gap = traj.states[-1, :, 0].mean() - law.points[-1, :, 0].mean()
    expected = 0.25 * gap * gap
    np.testing.assert_allclose(stats.drift_variance_per_particle, expected, rtol=1e-8, atol=1e-15)
    assert stats.n_particles == 30
    assert stats.time == 1.0


def test_centered_stats_need_three_particles(small_grid, linear_kernel):
    init, bundle = _inputs(2, small_grid)
    law = analytic_linear_flow(linear_kernel, "gaussian", {"mean": 0.0, "cov": 1.0}, small_grid, M_law=50)
    traj = euler_limit_particles(linear_kernel, init, bundle, small_grid, law)
    with pytest.raises(ArgumentError):
        centered_kernel_stats(linear_kernel, traj, law)
