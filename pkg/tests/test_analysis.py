import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from mvsde.analysis import (
    DEFAULT_ETA,
    MonteCarloEstimate,
    RhoEta,
    alpha_envelope_check,
    bihari_bound,
    check_modulus_domination,
    chi2_variance_band,
    fit_combined_rate,
    fit_rate,
    mean_band,
    rho_eta,
    within_standard_errors,
)
from mvsde.errors import ArgumentError
from mvsde.kernels import constant_modulus, log_modulus

E2 = math.exp(-2.0)


def test_rho_examples():
    assert rho_eta(0.0) == 0.0
    assert rho_eta(E2) == pytest.approx(2 * E2, abs=1e-15)
    assert rho_eta(1.0) == pytest.approx(1.0 + E2, abs=1e-15)


def test_rho_is_continuous_increasing_and_concave():
    rho = RhoEta(DEFAULT_ETA)
    assert abs(rho(E2 * (1 - 1e-12)) - rho(E2 * (1 + 1e-12))) < 1e-10
    xs = np.linspace(1e-6, 3.0, 20001)
    values = rho(xs)
    assert np.all(np.diff(values) > 0)
    assert np.all(np.diff(values, 2) <= 1e-12)


def test_rho_rejects_negative_and_bad_eta():
    with pytest.raises(ArgumentError):
        rho_eta(-1.0)
    with pytest.raises(ArgumentError):
        RhoEta(0.5)


def test_domination_examples():
    assert check_modulus_domination(constant_modulus(1.0), eta=E2).passed
    failing = check_modulus_domination(constant_modulus(10.0), eta=E2)
    assert not failing.passed
    assert failing.violating_x is not None


def test_domination_finds_eta_for_log_modulus():
    report = check_modulus_domination(log_modulus(E2))
    assert report.passed
    assert report.eta < E2
    assert not check_modulus_domination(log_modulus(E2), eta=E2).passed


def test_domination_for_scaled_log_modulus():
    report = check_modulus_domination(log_modulus(E2, scale=0.5))
    assert report.passed
    assert report.eta <= E2
    assert check_modulus_domination(log_modulus(E2, scale=0.5), eta=report.eta).passed


def test_domination_rejects_bad_grid():
    with pytest.raises(ArgumentError):
        check_modulus_domination(constant_modulus(), eta=E2, grid=[0.0, 1.0])


def test_bihari_examples():
    assert bihari_bound(0.01, 0.0, 0.1) == pytest.approx(0.01)
    assert bihari_bound(0.01, math.log(2.0), 0.1) == pytest.approx(0.1)
    assert bihari_bound(1e-6, math.log(3.0), 0.1) == pytest.approx(1e-2)


def test_bihari_preconditions():
    with pytest.raises(ArgumentError):
        bihari_bound(0.2, 1.0, 0.1)
    with pytest.raises(ArgumentError):
        bihari_bound(0.0, 1.0, 0.1)
    with pytest.raises(ArgumentError):
        bihari_bound(0.01, -1.0, 0.1)


def test_bihari_is_monotone():
    qs = np.linspace(0.0, 3.0, 31)
    bounds = [bihari_bound(1e-4, q, 0.3) for q in qs]
    assert np.all(np.diff(bounds) > 0)
    assert bihari_bound(1e-4, 1.0, 0.3) < bihari_bound(1e-3, 1.0, 0.3)


def test_bihari_dominates_comparison_ode():
    eta, g0 = 0.3, 1e-3
    rho = RhoEta(eta)
    sol = solve_ivp(lambda t, g: [float(rho(max(g[0], 0.0)))], (0.0, 1.0), [g0], rtol=1e-10, atol=1e-14)
    g1 = sol.y[0, -1]
    assert g1 < eta
    assert g1 <= bihari_bound(g0, 1.0, eta) * (1 + 1e-6)


def test_fit_rate_recovers_power_laws():
    ns = np.array([8, 16, 32, 64, 128, 256, 512], dtype=float)
    fit = fit_rate(ns, 3.0 / ns)
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)
    assert fit.r_squared == pytest.approx(1.0)
    hs = 2.0 ** -np.arange(3, 9)
    assert fit_rate(hs, 0.5 * hs ** 0.8).slope == pytest.approx(0.8, abs=1e-12)


def test_fit_rate_hand_points():
    fit = fit_rate([1, 2, 4], [4, 2, 1])
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(4.0), abs=1e-12)
    np.testing.assert_allclose(fit.predict([8.0]), [0.5], rtol=1e-12)


def test_fit_rate_scale_invariance_and_residuals(rng):
    xs = np.array([8.0, 16.0, 32.0, 64.0])
    errs = (1.0 / xs) * np.exp(rng.normal(scale=0.1, size=4))
    a, b = fit_rate(xs, errs), fit_rate(xs, 10.0 * errs)
    assert a.slope == pytest.approx(b.slope, abs=1e-12)
    reproduced = a.intercept + a.slope * np.log(xs) + a.residuals
    np.testing.assert_allclose(reproduced, np.log(errs), atol=1e-12)


def test_fit_rate_preconditions():
    with pytest.raises(ArgumentError):
        fit_rate([1, 2], [1, 2])
    with pytest.raises(ArgumentError):
        fit_rate([1, 2, 3], [1, 0, 2])
    with pytest.raises(ArgumentError):
        fit_rate([1, 1, 2], [1, 2, 3])


def test_alpha_envelope():
    hs = 2.0 ** -np.arange(4, 9)
    assert alpha_envelope_check(hs, hs, 0.4)
    assert alpha_envelope_check(hs, hs ** 0.8, 0.4)
    assert not alpha_envelope_check(hs, np.ones_like(hs), 0.4)
    with pytest.raises(ArgumentError):
        alpha_envelope_check(hs[::-1], hs[::-1], 0.4)
    with pytest.raises(ArgumentError):
        alpha_envelope_check(hs, hs, 0.6)


def test_combined_fit_recovers_coefficients():
    ns = np.array([16.0, 64.0, 256.0, 16.0, 64.0])
    hs = np.array([2.0 ** -4, 2.0 ** -6, 2.0 ** -8, 2.0 ** -8, 2.0 ** -4])
    errs = 2.0 / ns + 0.3 * hs ** 0.8
    fit = fit_combined_rate(ns, hs, errs, 0.4)
    assert fit.c_particles == pytest.approx(2.0, rel=1e-8)
    assert fit.c_step == pytest.approx(0.3, rel=1e-8)
    assert fit.relative_residual < 1e-10


def test_monte_carlo_helpers():
    est = MonteCarloEstimate.from_values([1.0, 2.0, 3.0, 4.0])
    assert est.mean == 2.5
    assert est.stderr == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert within_standard_errors(est, 3.0, k=1)
    assert not within_standard_errors(est, 5.0, k=3)
    assert within_standard_errors(MonteCarloEstimate.from_values([1.0]), 1.05, slack=0.1)
    lo, hi = chi2_variance_band(2.0, 1000)
    assert lo < 2.0 < hi
    assert mean_band(0.0, 1.0, 100) == pytest.approx((-0.4, 0.4))


def test_domination_reference_cases():
    assert check_modulus_domination(constant_modulus(0.5), eta=E2).passed
    assert check_modulus_domination(log_modulus(E2), eta=math.exp(-3.0)).passed
    doubled = check_modulus_domination(log_modulus(E2, scale=2.0), eta=E2)
    assert not doubled.passed
    assert doubled.violating_x < E2
