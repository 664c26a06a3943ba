"""Seeded Monte Carlo experiments.

A :class:`Scenario` fixes a signal, a noise model and an estimator; a grid
of overrides varies any of those fields. For each grid point the truth and
the oracle weights are computed once, then every replication draws a fresh
panel from a seed derived from ``(base_seed, grid_index, rep)``.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ExperimentError
from .inference import (
    EstimatorConfig,
    confidence_interval,
    deviation_bound,
    error_decomposition,
    estimate_tau,
    fit_oracle,
    fit_weights,
    plugin_sigma_tau,
    variance_estimate,
)
from .paneldata import GroundTruth, NoiseSpec, SignalSpec, generate_panel, generate_truth
from .rates import effective_sample_size
from .rng import derive_seed
from .solver import ConstraintSet
from .spectral import svd

EXPERIMENTS = ("coverage", "zstat_normality", "coef_rate_scaling", "deviation_bound_check",
               "concentration_check")
WORKERS_ENV = "EIVSC_WORKERS"
TRUTH_KEY = 0xFFFFFFFF
MAX_NONCONVERGED = 0.05
DECOMP_TOL = 1e-12


@dataclass(frozen=True)
class Scenario:
    """Simulation design.

    With ``signal_scaling="sqrt_np"`` the singular values are multiplied by
    ``sqrt(n p)``, so entries of ``A`` stay of order one as the grid grows.
    """

    n: int = 100
    p: int = 20
    rank: int = 2
    singular_values: Sequence[float] = (2.0, 1.0)
    signal_scaling: str = "sqrt_np"
    factor_style: str = "random_orthonormal"
    a_e_style: str = "typical_row"
    misspecification: float = 0.0
    noise_sigma: float = 1.0
    sigma_e: Optional[float] = None
    p_e: int = 1
    ar_rho: float = 0.0
    distribution: str = "gaussian"
    tau: float = 0.0
    eta: float = 1.0
    constraint: str = "simplex"
    intercept: bool = False
    variance_method: str = "plugin"
    alpha: float = 0.05
    use_oracle_estimator: bool = False
    experiment: str = "coverage"
    grid: Sequence[dict] = ()
    n_reps: int = 100
    base_seed: int = 0
    tol: float = 1e-8
    max_iter: int = 100_000

    def __post_init__(self):
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.signal_scaling not in ("sqrt_np", "absolute"):
            raise ValueError(f"unknown signal scaling {self.signal_scaling!r}")
        names = {f.name for f in dataclasses.fields(self)} - {"grid", "n_reps", "base_seed"}
        for i, g in enumerate(self.grid):
            if not isinstance(g, dict):
                raise ValueError(f"grid entry {i} is not a mapping")
            bad = set(g) - names
            if bad:
                raise ValueError(f"grid entry {i} has unknown keys {sorted(bad)}")
        ConstraintSet.parse(self.constraint)
        object.__setattr__(self, "singular_values", tuple(float(x) for x in self.singular_values))
        object.__setattr__(self, "grid", tuple(dict(g) for g in self.grid))

    def points(self):
        """Scenarios for each grid point (one point when the grid is empty)."""
        if not self.grid:
            return [dataclasses.replace(self, grid=())]
        return [dataclasses.replace(self, grid=(), **g) for g in self.grid]

    def signal_spec(self) -> SignalSpec:
        sv = np.asarray(self.singular_values, dtype=float)[: self.rank]
        if self.signal_scaling == "sqrt_np":
            sv = sv * math.sqrt(self.n * self.p)
        return SignalSpec(self.rank, tuple(sv), self.factor_style, self.a_e_style,
                          self.misspecification)

    def noise_spec(self) -> NoiseSpec:
        if self.ar_rho:
            ns = NoiseSpec.ar1_columns(self.n, self.p, self.noise_sigma, self.ar_rho, self.p_e,
                                       self.distribution)
            if self.sigma_e is not None:
                raise ValueError("sigma_e is implied by the AR(1) model")
            return ns
        return NoiseSpec.iid_columns(self.n, self.p, self.noise_sigma, self.p_e,
                                     sigma_e=self.sigma_e, distribution=self.distribution)

    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(self.eta, ConstraintSet.parse(self.constraint), self.intercept,
                               self.tol, self.max_iter)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["singular_values"] = list(self.singular_values)
        d["grid"] = [dict(g) for g in self.grid]
        return d


COLUMNS = (
    "grid_index", "rep", "seed", "n", "p", "p_eff", "tau", "tau_hat", "tau_tilde",
    "E_tau_tilde", "dev", "bias", "noise", "coef_dev", "pred_dev", "sigma_tau_hat",
    "sigma_tau", "ci_low", "ci_high", "covered", "covered_tau", "z", "converged",
    "decomposition_error",
)


@dataclass
class GridPoint:
    index: int
    scenario: Scenario
    truth: GroundTruth
    oracle: object
    p_eff: float
    sigma_tau: float
    E_tau_tilde: float


@dataclass
class ReplicationTable:
    """Column-oriented replication results keyed by ``(grid_index, rep)``."""

    columns: dict
    grid: list = field(default_factory=list)

    def __len__(self):
        return len(self.columns["rep"])

    def __getitem__(self, name):
        return self.columns[name]

    def at(self, grid_index) -> "ReplicationTable":
        mask = self.columns["grid_index"] == grid_index
        cols = {k: v[mask] for k, v in self.columns.items()}
        return ReplicationTable(cols, [g for g in self.grid if g.index == grid_index])

    def grid_indices(self):
        return sorted(set(int(i) for i in self.columns["grid_index"]))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for i in range(len(self)):
                w.writerow([_fmt(self.columns[c][i]) for c in COLUMNS])


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    return repr(float(x))


def _workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def prepare_grid(sc: Scenario):
    """Truth and oracle for each grid point."""
    out = []
    for gi, pt in enumerate(sc.points()):
        truth = generate_truth(pt.signal_spec(), pt.noise_spec(), pt.tau,
                               derive_seed(sc.base_seed, gi, TRUTH_KEY))
        cfg = pt.estimator()
        oracle = fit_oracle(truth, cfg)
        if not oracle.converged:
            raise ExperimentError(f"oracle did not converge at grid point {gi}")
        ns = truth.noise
        p_eff = effective_sample_size(oracle.theta, ns.p_e)
        sig = plugin_sigma_tau(ns.sigma_e, ns.p_e, oracle.theta)
        e_tt = truth.b_e + truth.tau - oracle.theta0 - truth.a_e @ oracle.theta
        out.append(GridPoint(gi, pt, truth, oracle, p_eff, sig, float(e_tt)))
    return out


def _replicate(gp: GridPoint, rep: int, base_seed: int):
    sc = gp.scenario
    truth, oracle = gp.truth, gp.oracle
    seed = derive_seed(base_seed, gp.index, rep)
    panel = generate_panel(truth, seed)
    cfg = sc.estimator()
    fit = oracle if sc.use_oracle_estimator else fit_weights(panel, truth.noise, cfg)
    tau_hat = estimate_tau(panel, fit)
    tau_tilde = float(panel.y_e - oracle.theta0 - panel.x_e @ oracle.theta)
    dev, bias, noise = error_decomposition(truth, oracle.theta, panel, tau_hat, oracle.theta0)
    err = abs((dev + bias + noise) - (tau_hat - truth.tau))
    if err > DECOMP_TOL * max(1.0, abs(tau_hat), abs(truth.tau)):
        raise ExperimentError(f"decomposition identity failed at grid {gp.index}, rep {rep}")
    sig_hat = variance_estimate(fit, panel, truth.noise, sc.variance_method, cfg)
    lo, hi = confidence_interval(tau_hat, sig_hat, sc.alpha)
    d = fit.theta - oracle.theta
    S = truth.noise.sigma_row
    coef_dev = math.sqrt(max(0.0, d @ S @ d))
    pred_dev = float(np.linalg.norm(truth.A @ d + (fit.theta0 - oracle.theta0)))
    return (
        gp.index, rep, seed, truth.n, truth.p, gp.p_eff, truth.tau, tau_hat, tau_tilde,
        gp.E_tau_tilde, dev, bias, noise, coef_dev, pred_dev, sig_hat, gp.sigma_tau, lo, hi,
        lo <= gp.E_tau_tilde <= hi, lo <= truth.tau <= hi,
        (tau_hat - gp.E_tau_tilde) / gp.sigma_tau if gp.sigma_tau > 0 else math.nan,
        bool(fit.converged), err,
    )


def run_scenario(sc: Scenario, workers: Optional[int] = None) -> ReplicationTable:
    """Run every replication of every grid point.

    Raises
    ------
    ExperimentError
        If more than 5% of the fits at some grid point fail to converge.
    """
    grid = prepare_grid(sc)
    tasks = [(gp, r) for gp in grid for r in range(sc.n_reps)]
    workers = _workers() if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(lambda t: _replicate(t[0], t[1], sc.base_seed), tasks))
    else:
        rows = [_replicate(gp, r, sc.base_seed) for gp, r in tasks]
    cols = {name: np.array([row[i] for row in rows]) for i, name in enumerate(COLUMNS)}
    table = ReplicationTable(cols, grid)
    for gp in grid:
        conv = table.at(gp.index)["converged"]
        if 1.0 - conv.mean() > MAX_NONCONVERGED:
            raise ExperimentError(
                f"grid point {gp.index}: {int((~conv).sum())} of {conv.size} fits did not converge"
            )
    return table


# ---------------------------------------------------------------------------
# summaries


def coverage_summary(table: ReplicationTable, target="E_tau_tilde"):
    """Fraction of intervals covering the target and its binomial standard error."""
    key = {"E_tau_tilde": "covered", "tau": "covered_tau"}.get(target)
    if key is None:
        raise ValueError(f"unknown coverage target {target!r}")
    flags = np.asarray(table[key], dtype=float)
    if flags.size == 0:
        raise ValueError("empty table")
    c = float(flags.mean())
    return c, float(math.sqrt(c * (1.0 - c) / flags.size))


def ks_statistic(samples) -> float:
    """Kolmogorov-Smirnov distance between the sample and the standard normal."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    m = x.size
    if m < 2:
        raise ValueError("need at least two samples")
    F = ndtr(x)
    i = np.arange(1, m + 1)
    return float(max(np.max(i / m - F), np.max(F - (i - 1) / m)))


def rate_slope(table: ReplicationTable, x_field="n", y_field="coef_dev"):
    """OLS slope (and its standard error) of log median ``y`` on log ``x`` across grid points."""
    xs, ys = [], []
    for gi in table.grid_indices():
        sub = table.at(gi)
        xs.append(float(np.median(sub[x_field])))
        ys.append(float(np.median(sub[y_field])))
    xs, ys = np.asarray(xs), np.asarray(ys)
    if np.unique(xs).size < 3:
        raise ValueError("need at least three distinct x values")
    if np.any(ys <= 0) or np.any(xs <= 0):
        raise ValueError("medians must be positive for a log-log fit")
    lx, ly = np.log(xs), np.log(ys)
    Z = np.column_stack([np.ones_like(lx), lx])
    coef, *_ = np.linalg.lstsq(Z, ly, rcond=None)
    resid = ly - Z @ coef
    dof = lx.size - 2
    if dof > 0:
        s2 = resid @ resid / dof
        se = float(math.sqrt(s2 / np.sum((lx - lx.mean()) ** 2)))
    else:
        se = 0.0
    return float(coef[1]), se


def bound_violation_rate(table: ReplicationTable, s_star, prediction_bound):
    """Fractions of replications with ``coef_dev > s_star`` and ``pred_dev > prediction_bound``."""
    cd = np.asarray(table["coef_dev"])
    pdv = np.asarray(table["pred_dev"])
    if cd.size == 0:
        return 0.0, 0.0
    return float(np.mean(cd > s_star)), float(np.mean(pdv > prediction_bound))


def deviation_bound_check(table: ReplicationTable, quantile=0.99, w1=3.0, w2=3.0, v=1.0,
                          width=None):
    """Frequency of ``|tau_hat - tau_tilde|`` above the deviation bound, per grid point.

    ``s`` is the empirical ``quantile`` of ``coef_dev`` at each grid point;
    ``width`` defaults to ``sqrt(log p)``.
    """
    out = []
    for gp in table.grid:
        sub = table.at(gp.index)
        s = float(np.quantile(sub["coef_dev"], quantile))
        w = math.sqrt(max(math.log(gp.truth.p), 1.0)) if width is None else width
        rep = deviation_bound(gp.truth.a_e, svd(gp.truth.A), gp.truth.noise, s, w1, w2, w,
                              gp.scenario.eta, v=v)
        viol = float(np.mean(np.abs(sub["dev"]) > rep.bound))
        out.append({"grid_index": gp.index, "s": s, "bound": rep.bound, "violation_rate": viol,
                    "D": rep.D, "probability_terms": list(rep.probability_terms)})
    return out


def summarize(table: ReplicationTable, sc: Scenario) -> dict:
    """JSON-ready summary of a run."""
    per_grid = []
    for gp in table.grid:
        sub = table.at(gp.index)
        cov, se = coverage_summary(sub, "E_tau_tilde")
        cov_tau, se_tau = coverage_summary(sub, "tau")
        z = sub["z"][np.isfinite(sub["z"])]
        per_grid.append({
            "grid_index": gp.index,
            "overrides": dict(sc.grid[gp.index]) if sc.grid else {},
            "n": gp.truth.n,
            "p": gp.truth.p,
            "p_eff": gp.p_eff,
            "sigma_tau": gp.sigma_tau,
            "E_tau_tilde": gp.E_tau_tilde,
            "oracle_bias": gp.E_tau_tilde - gp.truth.tau,
            "coverage_E_tau_tilde": cov,
            "coverage_E_tau_tilde_se": se,
            "coverage_tau": cov_tau,
            "coverage_tau_se": se_tau,
            "ks_z": ks_statistic(z) if z.size >= 2 else None,
            "median_coef_dev": float(np.median(sub["coef_dev"])),
            "median_pred_dev": float(np.median(sub["pred_dev"])),
            "nonconverged": int((~sub["converged"].astype(bool)).sum()),
            "max_decomposition_error": float(np.max(sub["decomposition_error"])),
        })
    out = {"experiment": sc.experiment, "n_rows": len(table), "grid": per_grid,
           "notes": ["coverage targets E[tau_tilde]; tau coverage also needs small oracle bias"]}
    for xf in ("n", "p_eff"):
        try:
            out[f"slope_coef_dev_vs_{xf}"] = rate_slope(table, xf, "coef_dev")
        except ValueError:
            pass
    if sc.experiment == "deviation_bound_check":
        out["deviation_bound"] = deviation_bound_check(table)
    return out
