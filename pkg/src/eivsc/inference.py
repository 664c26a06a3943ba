"""Synthetic control estimation, error decomposition, variance and diagnostics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .errors import DimensionError
from .paneldata import GroundTruth, NoiseSpec, PanelObservation, estimate_noise_spec
from .rates import effective_sample_size
from .solver import ConstraintSet, FitResult, ProblemSpec, SolverOptions, solve, solve_oracle
from .spectral import SvdDecomposition, svd, typicality_D

VARIANCE_METHODS = ("plugin", "jackknife_treated", "placebo_controls")

BIAS_CAVEAT = (
    "interval is centered for E[tau_tilde]; it covers tau only when the oracle bias "
    "b_e - a_e'theta_tilde is small relative to sigma_tau"
)


@dataclass(frozen=True)
class EstimatorConfig:
    eta: float = 1.0
    constraint: ConstraintSet = field(default_factory=ConstraintSet)
    intercept: Optional[bool] = None
    tol: float = 1e-8
    max_iter: int = 100_000

    def solver_options(self) -> SolverOptions:
        return SolverOptions(tol=self.tol, max_iter=self.max_iter)

    def use_intercept(self, panel: Optional[PanelObservation] = None) -> bool:
        if self.intercept is not None:
            return bool(self.intercept)
        return panel is not None and panel.orientation == "rows_are_units"


def fit_weights(panel: PanelObservation, noise: NoiseSpec, config: EstimatorConfig) -> FitResult:
    """Empirical-mode fit of ``y`` on ``X`` with the noise spec's ``Sigma_row`` and ``psi``."""
    if noise.p != panel.p:
        raise DimensionError("noise spec and panel disagree on p")
    problem = ProblemSpec(panel.X, panel.y, noise.sigma_row, noise.psi, config.eta, "empirical",
                          config.use_intercept(panel), config.constraint)
    return solve(problem, config.solver_options())


def fit_oracle(truth: GroundTruth, config: EstimatorConfig) -> FitResult:
    """Oracle weights from the signal ``(A, b)``."""
    n = truth.noise
    return solve_oracle(truth.A, truth.b, n.sigma_row, n.psi, config.eta, config.constraint,
                        config.use_intercept(), config.solver_options())


def estimate_tau(panel: PanelObservation, fit: FitResult) -> float:
    """``y_e - theta0 - x_e' theta``."""
    theta = np.asarray(fit.theta, dtype=float).ravel()
    if theta.shape[0] != panel.p:
        raise DimensionError(f"fit has {theta.shape[0]} weights, panel has {panel.p} controls")
    return float(panel.y_e - fit.theta0 - panel.x_e @ theta)


def error_decomposition(truth: GroundTruth, theta_tilde, panel: PanelObservation, tau_hat,
                        theta0_tilde=0.0):
    """Split ``tau_hat - tau`` into oracle deviation, oracle bias and oracle noise.

    ``bias = b_e - theta0_tilde - a_e' theta_tilde`` and
    ``noise = nu_e - eps_e' theta_tilde`` with the noise read off as
    observation minus truth; ``dev`` is the remainder.
    """
    if truth is None:
        raise ValueError("error decomposition needs the ground truth")
    tt = np.asarray(theta_tilde, dtype=float).ravel()
    if tt.shape[0] != truth.p or panel.p != truth.p:
        raise DimensionError("theta_tilde, panel and truth must share p")
    eps_e = panel.x_e - truth.a_e
    nu_e = panel.y_e - truth.b_e - truth.tau
    bias = float(truth.b_e - theta0_tilde - truth.a_e @ tt)
    noise = float(nu_e - eps_e @ tt)
    dev = float((tau_hat - truth.tau) - bias - noise)
    return dev, bias, noise


# ---------------------------------------------------------------------------
# deviation bound


@dataclass(frozen=True)
class DeviationReport:
    bound: float
    D: float
    D_tilde: float
    w1: float
    w2: float
    v: float
    probability_terms: tuple
    s_used: float
    sigma: float
    width: float

    def to_dict(self):
        return asdict(self)


def deviation_bound(a_e, dec: SvdDecomposition, noise: NoiseSpec, s, w1=1.0, w2=1.0, width=1.0,
                    eta=1.0, sigma=None, v=1.0, R=None) -> DeviationReport:
    """High-probability bound on ``|tau_hat - tau_tilde|``.

    ``(s / sigma)(sqrt(2) D + w2 L) + (1 + w1) ||psi_col' Sigma_col^{1/2}|| width``
    where ``L`` is the L2 norm of ``eps_ej - psi_col' eps_.j``. The failure
    probabilities are reported with unit constants.
    """
    sigma = noise.sigma if sigma is None else float(sigma)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if eta <= 0:
        raise ValueError("eta must be positive")
    if s < 0:
        raise ValueError("s must be nonnegative")
    n = noise.n
    L = noise.col_residual_sd
    rep = typicality_D(a_e, dec, sigma, eta, n, L)
    ac = noise.psi_col_norm
    bound = (s / sigma) * (math.sqrt(2.0) * rep.D + w2 * L) + (1.0 + w1) * ac * width
    R = dec.rank if R is None else R
    if s > 0:
        ratio = width / s
        ratio = ratio * ratio
        u = min(v**2 * sigma**2 * ratio, v**2 * R, n)
        probs = (math.exp(-u), 2.0 * math.exp(-(w1**2) * ratio), 2.0 * math.exp(-(w2**2)))
    else:
        probs = (math.exp(-min(v**2 * R, n)) if R > 0 else 1.0, 0.0, 2.0 * math.exp(-(w2**2)))
    return DeviationReport(float(bound), rep.D, rep.D_tilde, float(w1), float(w2), float(v),
                           tuple(float(x) for x in probs), float(s), sigma, float(width))


# ---------------------------------------------------------------------------
# variance and intervals


def plugin_sigma_tau(sigma_e, p_e, theta) -> float:
    """``sigma_e sqrt(1/p_e + ||theta||^2)``."""
    return float(sigma_e / math.sqrt(effective_sample_size(theta, p_e)))


def variance_estimate(fit: FitResult, panel: PanelObservation, noise: Optional[NoiseSpec],
                      method="plugin", config: Optional[EstimatorConfig] = None,
                      max_placebos=None) -> float:
    """Standard error of ``tau_hat``.

    ``plugin`` uses ``sigma_e`` and ``p_e`` from ``noise``.
    ``jackknife_treated`` deletes one treated series at a time and keeps the
    weights fixed. ``placebo_controls`` refits with each control as a
    pseudo-treated unit and rescales the spread of the normalized gaps.
    """
    theta = np.asarray(fit.theta, dtype=float)
    if method == "plugin":
        if noise is None:
            raise ValueError("plugin variance needs a noise spec")
        return plugin_sigma_tau(noise.sigma_e, noise.p_e, theta)
    if method == "jackknife_treated":
        T = panel.treated_series
        if T is None or T.shape[1] < 2:
            raise ValueError("jackknife_treated needs at least two treated series")
        m = T.shape[1]
        loo = (T.sum(axis=1, keepdims=True) - T) / (m - 1)
        taus = np.empty(m)
        intercept = config.use_intercept(panel) if config is not None else fit.theta0 != 0.0
        for k in range(m):
            y_k, ye_k = loo[:-1, k], loo[-1, k]
            th0 = float(np.mean(y_k - panel.X @ theta)) if intercept else 0.0
            taus[k] = ye_k - th0 - panel.x_e @ theta
        return float(math.sqrt((m - 1) / m * np.sum((taus - taus.mean()) ** 2)))
    if method == "placebo_controls":
        if panel.p < 3:
            raise ValueError("placebo_controls needs at least three controls")
        if noise is None:
            raise ValueError("placebo_controls needs p_e from a noise spec")
        config = config or EstimatorConfig()
        p = panel.p
        js = range(p) if max_placebos is None else range(min(p, int(max_placebos)))
        z = []
        for j in js:
            keep = np.delete(np.arange(p), j)
            S = noise.sigma_row[np.ix_(keep, keep)]
            prob = ProblemSpec(panel.X[:, keep], panel.X[:, j], S, noise.psi[keep], config.eta,
                               "empirical", config.use_intercept(panel), config.constraint)
            f = solve(prob, config.solver_options())
            gap = panel.x_e[j] - f.theta0 - panel.x_e[keep] @ f.theta
            z.append(gap / math.sqrt(1.0 + f.theta @ f.theta))
        z = np.asarray(z)
        return float(z.std(ddof=1) * math.sqrt(1.0 / noise.p_e + theta @ theta))
    raise ValueError(f"unknown variance method {method!r}")


def normal_quantile(q) -> float:
    return float(norm.ppf(q))


def confidence_interval(tau_hat, sigma_tau, alpha=0.05):
    """``tau_hat +/- z_{alpha/2} sigma_tau``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if sigma_tau < 0:
        raise ValueError("sigma_tau must be nonnegative")
    half = normal_quantile(1.0 - alpha / 2.0) * sigma_tau
    return float(tau_hat - half), float(tau_hat + half)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class DiagnosticsReport:
    """Finite-sample ratios for the conditions behind approximate normality.

    ``<<`` conditions pass at ``ratio <= threshold``; ``<~`` conditions (the
    eta lower bounds and the singular value substitute) pass at ``ratio <= 1``.
    """

    fit_ratio: float
    eta_lower_ratios: tuple
    rank_ratio: float
    rank_ratio_branches: tuple
    p_eff_ratios: tuple
    eta_upper_ratio: float
    typicality_ratio: float
    sv_substitute_R: Optional[int]
    sv_substitute_ratio: Optional[float]
    kappa: float
    kappa_prime: float
    threshold: float
    D_tilde: float
    verdicts: dict

    @property
    def all_pass(self) -> bool:
        return all(v["passed"] for v in self.verdicts.values())

    def to_dict(self):
        return asdict(self)


def _safe_div(a, b):
    if b == 0:
        return 0.0 if a == 0 else math.inf
    if math.isinf(b):
        return 0.0 if not math.isinf(a) else math.nan
    return a / b


def normality_diagnostics(n, p, eta, sigma, sigma_e, p_eff, D_tilde, rank, fit_error=0.0,
                          psi_col_norm=0.0, kappa=1.0, kappa_prime=1.0, threshold=0.1,
                          singular_values=None, a_e_norm=None, D=None) -> DiagnosticsReport:
    """Ratios ``LHS / RHS`` (unit constants) for each normality condition.

    ``fit_error`` is ``||A theta_tilde - b||``; ``psi_col_norm`` is
    ``||psi_col' Sigma_col^{1/2}||``.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    logp = max(math.log(p), 1.0)
    sig_tau_sq = sigma_e**2 / p_eff
    r = math.inf if D_tilde == 0 else eta * sigma_e / D_tilde
    r2, r4 = r**2, r**4

    fit_ratio = _safe_div(fit_error**2 / n, n ** (kappa - 1.0) * sig_tau_sq)

    delta_fit = fit_error / math.sqrt(n)
    rk = max(rank, 0)
    b1 = min(n, math.sqrt(p_eff * n * logp), _safe_div(p_eff * n * logp, rk))
    e1 = _safe_div(max(sigma**2, 1.0), eta**2 * b1)
    inv = math.inf if sigma == 0 else max(sigma, 1.0 / sigma)
    b2 = min(_safe_div(math.sqrt(n * logp), delta_fit), _safe_div(math.sqrt(p_eff) * n * logp, math.sqrt(rk)))
    e2 = _safe_div(inv, eta**2 * b2)

    def rank_branches(R):
        return (_safe_div(R, n * r2), _safe_div(R, sigma**2 * n**2 / p_eff * r4))

    rb = rank_branches(rk)
    rank_ratio = max(rb)

    pe1 = _safe_div(p_eff, n / logp * min(r2, r4))
    pe2 = _safe_div(p_eff, n ** (2.0 - kappa) / logp * (sigma / sigma_e) ** 2 * r4) if sigma_e > 0 else math.inf
    pe3 = _safe_div(p_eff * logp * psi_col_norm**2, sigma_e**2)

    eta_up = eta / math.sqrt(n ** (kappa - 1.0) * p ** kappa_prime / p_eff)
    typ = _safe_div(D if D is not None else D_tilde, a_e_norm) if a_e_norm is not None else math.nan

    sv_R = sv_ratio = None
    if singular_values is not None:
        sv = np.asarray(singular_values, dtype=float)
        scale = sigma / math.sqrt(p_eff) / math.sqrt(logp)
        for R in range(sv.size + 1):
            nxt = float(sv[R]) if R < sv.size else 0.0
            if nxt <= scale * R:
                sv_R = R
                break
        nxt = float(sv[sv_R]) if sv_R < sv.size else 0.0
        sv_ratio = _safe_div(nxt, scale * sv_R)

    def lt(x):
        return {"ratio": float(x), "passed": bool(x <= threshold), "threshold": threshold}

    def le(x):
        return {"ratio": float(x), "passed": bool(x <= 1.0), "threshold": 1.0}

    verdicts = {
        "fit": lt(fit_ratio),
        "eta_lower_1": le(e1),
        "eta_lower_2": le(e2),
        "rank": lt(rank_ratio),
        "p_eff_1": lt(pe1),
        "p_eff_2": lt(pe2),
        "p_eff_3": lt(pe3),
    }
    if sv_R is not None:
        verdicts["sv_substitute"] = le(sv_ratio)
        verdicts["sv_substitute_rank"] = lt(max(rank_branches(sv_R)))
    return DiagnosticsReport(
        fit_ratio=float(fit_ratio),
        eta_lower_ratios=(float(e1), float(e2)),
        rank_ratio=float(rank_ratio),
        rank_ratio_branches=tuple(float(x) for x in rb),
        p_eff_ratios=(float(pe1), float(pe2), float(pe3)),
        eta_upper_ratio=float(eta_up),
        typicality_ratio=float(typ),
        sv_substitute_R=sv_R,
        sv_substitute_ratio=None if sv_ratio is None else float(sv_ratio),
        kappa=float(kappa),
        kappa_prime=float(kappa_prime),
        threshold=float(threshold),
        D_tilde=float(D_tilde),
        verdicts=verdicts,
    )


def diagnostics_from_truth(truth: GroundTruth, config: EstimatorConfig, kappa=1.0,
                           kappa_prime=1.0, threshold=0.1, oracle: Optional[FitResult] = None):
    """Evaluate :func:`normality_diagnostics` with every input computed from the truth."""
    noise = truth.noise
    oracle = oracle or fit_oracle(truth, config)
    dec = svd(truth.A)
    sigma = noise.sigma
    rep = typicality_D(truth.a_e, dec, sigma, config.eta, truth.n, noise.col_residual_sd)
    p_eff = effective_sample_size(oracle.theta, noise.p_e)
    fit_error = float(np.linalg.norm(oracle.theta0 + truth.A @ oracle.theta - truth.b))
    ac = noise.psi_col_norm
    return normality_diagnostics(truth.n, truth.p, config.eta, sigma, noise.sigma_e, p_eff,
                                 rep.D_tilde, dec.rank, fit_error, ac, kappa, kappa_prime,
                                 threshold, dec.singular_values, float(np.linalg.norm(truth.a_e)),
                                 rep.D)


# ---------------------------------------------------------------------------
# end-to-end


@dataclass(frozen=True)
class InferenceReport:
    tau_hat: float
    sigma_tau_hat: float
    ci_low: float
    ci_high: float
    alpha: float
    variance_method: str
    theta0: float
    theta: np.ndarray
    converged: bool
    optimality_residual: float
    tau_tilde: Optional[float] = None
    E_tau_tilde: Optional[float] = None
    decomposition: Optional[tuple] = None
    orientation: str = "columns_are_units"
    notes: tuple = ()

    def __post_init__(self):
        if not self.ci_low <= self.tau_hat <= self.ci_high:
            raise ValueError("interval must contain the point estimate")

    def to_dict(self):
        d = asdict(self)
        d["theta"] = [float(x) for x in self.theta]
        return d


def synthetic_control(panel: PanelObservation, noise: Optional[NoiseSpec] = None,
                      config: Optional[EstimatorConfig] = None, variance_method="plugin",
                      alpha=0.05, truth: Optional[GroundTruth] = None,
                      oracle: Optional[FitResult] = None, noise_method="residual_plugin"):
    """Fit weights, estimate tau and build an interval.

    When ``noise`` is omitted it is estimated with ``noise_method``. With
    ``truth`` the oracle quantities and the three-term decomposition are
    filled in as well.
    """
    config = config or EstimatorConfig()
    if variance_method not in VARIANCE_METHODS:
        raise ValueError(f"unknown variance method {variance_method!r}")
    if noise is None:
        noise = estimate_noise_spec(panel, noise_method)
    fit = fit_weights(panel, noise, config)
    tau_hat = estimate_tau(panel, fit)
    sig = variance_estimate(fit, panel, noise, variance_method, config)
    lo, hi = confidence_interval(tau_hat, sig, alpha)
    notes = [BIAS_CAVEAT]
    if variance_method == "placebo_controls":
        notes.append("placebo_controls rescaling is experimental")
    tau_tilde = e_tau = decomp = None
    if truth is not None:
        oracle = oracle or fit_oracle(truth, config)
        tau_tilde = float(panel.y_e - oracle.theta0 - panel.x_e @ oracle.theta)
        e_tau = float(truth.b_e + truth.tau - oracle.theta0 - truth.a_e @ oracle.theta)
        decomp = error_decomposition(truth, oracle.theta, panel, tau_hat, oracle.theta0)
    return InferenceReport(
        tau_hat=tau_hat, sigma_tau_hat=sig, ci_low=lo, ci_high=hi, alpha=alpha,
        variance_method=variance_method, theta0=fit.theta0, theta=fit.theta,
        converged=fit.converged, optimality_residual=fit.optimality_residual,
        tau_tilde=tau_tilde, E_tau_tilde=e_tau, decomposition=decomp,
        orientation=panel.orientation, notes=tuple(notes),
    )
