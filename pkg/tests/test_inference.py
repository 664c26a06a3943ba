import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from eivsc.inference import (EstimatorConfig, InferenceReport, confidence_interval,
                             deviation_bound, diagnostics_from_truth, error_decomposition,
                             estimate_tau, fit_oracle, fit_weights, normality_diagnostics,
                             plugin_sigma_tau, synthetic_control, variance_estimate)
from eivsc.paneldata import (NoiseSpec, PanelObservation, SignalSpec, generate_panel,
                             generate_truth)
from eivsc.solver import ConstraintSet, FitResult
from eivsc.spectral import svd


def _fit(theta, theta0=0.0):
    theta = np.asarray(theta, dtype=float)
    return FitResult(theta0, theta, 0.0, 0.0, 0, True, "convex")


def _truth(n=60, p=8, p_e=4, sigma=1.0, tau=1.0, seed=3, **kw):
    sig = SignalSpec(2, (2.0 * math.sqrt(n * p), math.sqrt(n * p)), **kw)
    return generate_truth(sig, NoiseSpec.iid_columns(n, p, sigma, p_e), tau, seed)


# ---------------------------------------------------------------------------
# point estimate and decomposition


def test_estimate_tau_examples():
    panel = PanelObservation(np.zeros((2, 2)), np.zeros(2), [1.0, 2.0], 5.0)
    assert estimate_tau(panel, _fit([0.0, 0.0])) == 5.0
    assert estimate_tau(panel, _fit([0.5, 0.5])) == 3.5


def test_zero_noise_recovers_tau():
    truth = generate_truth(SignalSpec(2, (5.0, 2.0)), NoiseSpec.zero(10, 4), 2.0, 1)
    panel = generate_panel(truth, 0)
    assert abs(estimate_tau(panel, _fit(truth.theta_star)) - 2.0) < 1e-12


def test_decomposition_examples():
    truth = _truth()
    cfg = EstimatorConfig()
    orc = fit_oracle(truth, cfg)
    panel = generate_panel(truth, 5)
    tau_hat = estimate_tau(panel, orc)
    dev, bias, noise = error_decomposition(truth, orc.theta, panel, tau_hat)
    assert abs(dev) < 1e-12
    fit = fit_weights(panel, truth.noise, cfg)
    tau_hat = estimate_tau(panel, fit)
    parts = error_decomposition(truth, orc.theta, panel, tau_hat)
    assert abs(sum(parts) - (tau_hat - truth.tau)) < 1e-12


def test_decomposition_zero_noise():
    truth = generate_truth(SignalSpec(2, (5.0, 2.0)), NoiseSpec.zero(10, 4), 1.5, 2)
    panel = generate_panel(truth, 0)
    th = np.full(4, 0.25)
    tau_hat = estimate_tau(panel, _fit(th))
    dev, bias, noise = error_decomposition(truth, th, panel, tau_hat)
    assert noise == 0.0
    assert abs(dev + bias - (tau_hat - truth.tau)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 3.0))
def test_decomposition_identity_property(seed, sigma):
    truth = _truth(n=20, p=5, sigma=sigma, seed=seed)
    panel = generate_panel(truth, seed + 1)
    th = np.random.default_rng(seed).dirichlet(np.ones(5))
    tau_hat = estimate_tau(panel, _fit(th, 0.3))
    parts = error_decomposition(truth, th, panel, tau_hat, 0.3)
    assert abs(sum(parts) - (tau_hat - truth.tau)) <= 1e-12 * max(1, abs(tau_hat))


# ---------------------------------------------------------------------------
# deviation bound


def test_deviation_bound_orthogonal_example():
    A = np.zeros((5, 3))
    A[:, 0] = 2.0
    a_e = np.array([0.0, 1.0, 2.0])
    ns = NoiseSpec.iid_columns(5, 3, 1.5)
    rep = deviation_bound(a_e, svd(A), ns, s=0.4, w1=1.0, w2=0.0, width=2.0)
    assert abs(rep.bound - math.sqrt(2) * 0.4 * math.sqrt(5) / 1.5) < 1e-12


def test_deviation_bound_zero_radius():
    ns = NoiseSpec.iid_columns(5, 3, 1.0)
    rep = deviation_bound(np.ones(3), svd(np.ones((5, 3))), ns, s=0.0, w2=2.0)
    assert rep.bound == 0.0


def test_deviation_bound_linear_in_w2():
    ns = NoiseSpec.ar1_columns(6, 3, 1.0, 0.5)
    dec = svd(np.random.default_rng(1).standard_normal((6, 3)))
    a_e = np.array([0.3, -0.2, 0.5])
    b1 = deviation_bound(a_e, dec, ns, 0.3, w2=1.0).bound
    b2 = deviation_bound(a_e, dec, ns, 0.3, w2=2.0).bound
    L = math.sqrt(1.0 - 0.25)
    assert abs((b2 - b1) - 0.3 / ns.sigma * L) < 1e-12


def test_deviation_bound_probability_terms():
    ns = NoiseSpec.iid_columns(50, 4, 1.0)
    dec = svd(np.random.default_rng(2).standard_normal((50, 4)))
    rep = deviation_bound(np.ones(4), dec, ns, 0.5, w1=2.0, w2=3.0, width=1.0)
    u = min(1.0 * 4.0, 4, 50)
    assert np.allclose(rep.probability_terms, [math.exp(-u), 2 * math.exp(-16.0), 2 * math.exp(-9.0)])


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 2), st.floats(0, 3), st.floats(0, 3), st.floats(0, 0.95))
def test_deviation_bound_monotone(s, w1, w2, rho):
    ns = NoiseSpec.ar1_columns(6, 3, 1.0, rho)
    ns2 = NoiseSpec.ar1_columns(6, 3, 1.0, min(rho + 0.04, 0.99))
    dec = svd(np.arange(18.0).reshape(6, 3))
    a_e = np.array([1.0, 0.5, -0.5])
    b = deviation_bound(a_e, dec, ns, s, w1, w2, 1.0).bound
    assert deviation_bound(a_e, dec, ns, s + 0.1, w1, w2, 1.0).bound >= b
    assert deviation_bound(a_e, dec, ns, s, w1 + 0.1, w2, 1.0).bound >= b
    assert deviation_bound(a_e, dec, ns, s, w1, w2 + 0.1, 1.0).bound >= b
    # a larger predictable part raises the psi_col term; hold L fixed via s = 0
    assert deviation_bound(a_e, dec, ns2, 0.0, w1, w2, 1.0).bound >= \
        deviation_bound(a_e, dec, ns, 0.0, w1, w2, 1.0).bound


# ---------------------------------------------------------------------------
# variance and intervals


def test_plugin_examples():
    ns = NoiseSpec.iid_columns(4, 4, 1.0, p_e=4, sigma_e=2.0)
    fit = _fit(np.full(4, 0.25))
    panel = PanelObservation(np.zeros((4, 4)), np.zeros(4), np.zeros(4), 0.0)
    assert abs(variance_estimate(fit, panel, ns, "plugin") - 2 * math.sqrt(0.5)) < 1e-12
    assert plugin_sigma_tau(1.7, 1, np.zeros(3)) == 1.7


def test_jackknife_identical_series_zero():
    T = np.tile(np.arange(5.0)[:, None], (1, 3))
    panel = PanelObservation(np.ones((4, 2)), T[:4, 0], np.ones(2), T[4, 0], T)
    assert variance_estimate(_fit([0.5, 0.5]), panel, None, "jackknife_treated") == 0.0


def test_jackknife_equals_standard_error_of_mean():
    rng = np.random.default_rng(0)
    T = rng.standard_normal((5, 6))
    y, y_e = T[:4].mean(1), T[4].mean()
    panel = PanelObservation(rng.standard_normal((4, 2)), y, rng.standard_normal(2), y_e, T)
    se = variance_estimate(_fit([0.5, 0.5]), panel, None, "jackknife_treated",
                           EstimatorConfig(intercept=False))
    assert abs(se - T[4].std(ddof=1) / math.sqrt(6)) < 1e-12


def test_jackknife_needs_series():
    panel = PanelObservation(np.ones((3, 2)), np.ones(3), np.ones(2), 1.0)
    with pytest.raises(ValueError):
        variance_estimate(_fit([0.5, 0.5]), panel, None, "jackknife_treated")


def test_placebo_runs():
    truth = _truth(p=6)
    panel = generate_panel(truth, 1)
    fit = fit_weights(panel, truth.noise, EstimatorConfig())
    se = variance_estimate(fit, panel, truth.noise, "placebo_controls", EstimatorConfig())
    assert se > 0 and math.isfinite(se)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(1, 10), st.integers(0, 10_000), st.floats(0.1, 5))
def test_plugin_simplex_bounds(p, p_e, seed, sigma_e):
    th = np.random.default_rng(seed).dirichlet(np.ones(p) * 0.3)
    s = plugin_sigma_tau(sigma_e, p_e, th)
    assert sigma_e * math.sqrt(1 / p_e + 1 / p) * (1 - 1e-12) <= s
    assert s <= sigma_e * math.sqrt(1 / p_e + 1) * (1 + 1e-12)


def test_confidence_interval_examples():
    lo, hi = confidence_interval(0.0, 1.0, 0.05)
    assert abs(lo + 1.95996) < 1e-4 and abs(hi - 1.95996) < 1e-4
    assert confidence_interval(2.0, 0.0) == (2.0, 2.0)
    lo, hi = confidence_interval(0.0, 1.0, 0.32)
    assert abs(hi - 0.99446) < 1e-4
    assert abs(hi - norm.ppf(0.84)) < 1e-12
    with pytest.raises(ValueError):
        confidence_interval(0.0, 1.0, 1.0)


def test_interval_scales_linearly():
    a = confidence_interval(1.0, 0.5)
    b = confidence_interval(1.0, 1.5)
    assert abs((b[1] - 1.0) - 3 * (a[1] - 1.0)) < 1e-12


def test_report_invariant():
    with pytest.raises(ValueError):
        InferenceReport(0.0, 1.0, 0.5, 1.0, 0.05, "plugin", 0.0, np.zeros(2), True, 0.0)


# ---------------------------------------------------------------------------
# diagnostics


def test_diagnostics_zero_rank():
    rep = normality_diagnostics(n=100, p=10, eta=1.0, sigma=1.0, sigma_e=1.0, p_eff=2.0,
                                D_tilde=1.0, rank=0)
    assert rep.rank_ratio == 0.0 and rep.verdicts["rank"]["passed"]


def test_diagnostics_rank_boundary():
    n, eta, se, Dt = 100, 1.0, 1.0, 2.0
    r2 = (eta * se / Dt) ** 2
    rank = n * r2
    rep = normality_diagnostics(n, 10, eta, 5.0, se, 1.0, Dt, rank)
    assert abs(rep.rank_ratio_branches[0] - 1.0) < 1e-12
    assert rep.rank_ratio_branches[1] <= 1.0
    assert abs(rep.rank_ratio - 1.0) < 1e-12 and not rep.verdicts["rank"]["passed"]


def test_diagnostics_p_eff_boundary():
    n, p = 1000, 20
    p_eff = n / (10 * math.log(p))
    rep = normality_diagnostics(n, p, 1.0, 1.0, 1.0, p_eff, 1.0, 2)
    assert abs(rep.p_eff_ratios[0] - 0.1) < 1e-12
    assert rep.verdicts["p_eff_1"]["passed"]


def test_diagnostics_fit_ratio():
    rep = normality_diagnostics(100, 10, 1.0, 1.0, 1.0, 2.0, 1.0, 1, fit_error=3.0)
    assert abs(rep.fit_ratio - (9.0 / 100) / 0.5) < 1e-12


def test_diagnostics_ideal_regime():
    reps = [diagnostics_from_truth(_truth(n=n, p=50, p_e=2), EstimatorConfig()) for n in (500, 4000)]
    for rep in reps:
        for key in ("fit", "rank", "eta_lower_1", "eta_lower_2", "p_eff_3"):
            assert rep.verdicts[key]["passed"], key
        assert 0 <= rep.typicality_ratio <= 1
    # the p_eff condition tightens roughly like log(p) / n
    assert reps[1].p_eff_ratios[0] < 0.25 * reps[0].p_eff_ratios[0]


# ---------------------------------------------------------------------------
# end to end


def test_synthetic_control_with_truth():
    truth = _truth()
    panel = generate_panel(truth, 9)
    rep = synthetic_control(panel, truth.noise, EstimatorConfig(), truth=truth)
    assert rep.ci_low <= rep.tau_hat <= rep.ci_high
    assert abs(sum(rep.decomposition) - (rep.tau_hat - truth.tau)) < 1e-12
    assert rep.converged and rep.notes
    d = rep.to_dict()
    assert isinstance(d["theta"], list) and len(d["theta"]) == 8


def test_synthetic_control_estimated_noise_and_methods():
    truth = _truth(p_e=5)
    panel = generate_panel(truth, 2)
    for method in ("plugin", "jackknife_treated", "placebo_controls"):
        rep = synthetic_control(panel, None, EstimatorConfig(), method)
        assert rep.sigma_tau_hat > 0
    with pytest.raises(ValueError):
        synthetic_control(panel, None, EstimatorConfig(), "bootstrap")


def test_forecasting_orientation_uses_intercept():
    truth = _truth()
    panel = generate_panel(truth, 3).transposed()
    cfg = EstimatorConfig(constraint=ConstraintSet("euclidean"), eta=1.5)
    assert cfg.use_intercept(panel)
    noise = NoiseSpec.iid_columns(panel.n, panel.p, 1.0)
    rep = synthetic_control(panel, noise, cfg)
    assert rep.orientation == "rows_are_units" and rep.converged
