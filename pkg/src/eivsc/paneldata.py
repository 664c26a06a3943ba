"""Panel data model, synthetic generators and CSV ingestion.

A panel is an ``(n + 1) x (p + 1)`` array of outcomes: ``n`` pre-treatment
periods plus one post-treatment period (rows) for ``p`` control units plus one
treated unit (columns). Observed values are a deterministic signal plus noise,

    [[X,    y  ],      [[A,    b       ],     [[eps,   nu  ],
     [x_e', y_e]]  =    [a_e', b_e + tau]]  +  [eps_e', nu_e]]

and the treated column may itself be the average of ``p_e`` independent
series.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from .errors import CSVFormatError, DimensionError, EmptyInputError, NotPSDError
from .rng import make_rng

ORIENTATIONS = ("columns_are_units", "rows_are_units")
FACTOR_STYLES = ("random_orthonormal", "common_trends")
A_E_STYLES = ("typical_row", "top_singular_aligned", "orthogonal_to_rowspace")
DISTRIBUTIONS = ("gaussian", "scaled_rademacher_mixture")


# ---------------------------------------------------------------------------
# covariance helpers: a 1-d array stands for a diagonal matrix


def cov_dense(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return np.diag(M) if M.ndim == 1 else M


def cov_opnorm(M) -> float:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return float(M.max()) if M.size else 0.0
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])


def cov_trace(M) -> float:
    M = np.asarray(M, dtype=float)
    return float(M.sum() if M.ndim == 1 else np.trace(M))


def cov_matvec(M, v) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return M * v if M.ndim == 1 else M @ v


def cov_quad(M, v) -> float:
    return float(v @ cov_matvec(M, v))


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class PanelObservation:
    """Observed outcomes.

    Attributes
    ----------
    X : (n, p) pre-treatment control outcomes
    y : (n,) pre-treatment treated outcomes
    x_e : (p,) post-treatment control outcomes
    y_e : post-treatment treated outcome
    treated_series : optional (n + 1, p_e) disaggregated treated series
    orientation : ``columns_are_units`` (synthetic control) or
        ``rows_are_units`` (counterfactual forecasting, panel transposed)
    """

    X: np.ndarray
    y: np.ndarray
    x_e: np.ndarray
    y_e: float
    treated_series: Optional[np.ndarray] = None
    orientation: str = "columns_are_units"

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        x_e = np.asarray(self.x_e, dtype=float).ravel()
        n, p = X.shape
        if y.shape[0] != n:
            raise DimensionError(f"y has length {y.shape[0]} but X has {n} rows")
        if x_e.shape[0] != p:
            raise DimensionError(f"x_e has length {x_e.shape[0]} but X has {p} columns")
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"unknown orientation {self.orientation!r}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x_e", x_e)
        object.__setattr__(self, "y_e", float(self.y_e))
        if self.treated_series is not None:
            T = np.asarray(self.treated_series, dtype=float)
            if T.ndim == 1:
                T = T[:, None]
            if T.shape[0] != n + 1 or T.shape[1] < 1:
                raise DimensionError(f"treated_series must be {n + 1} x p_e, got {T.shape}")
            yy, ye = aggregate_treated(T)
            scale = max(1.0, np.abs(T).max())
            if np.abs(yy - y).max() > 1e-12 * scale or abs(ye - self.y_e) > 1e-12 * scale:
                raise ValueError("treated_series does not average to (y, y_e)")
            object.__setattr__(self, "treated_series", T)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def p_e(self) -> int:
        return 1 if self.treated_series is None else self.treated_series.shape[1]

    def full_matrix(self) -> np.ndarray:
        """The ``(n + 1) x (p + 1)`` panel with the treated unit last."""
        top = np.column_stack([self.X, self.y])
        return np.vstack([top, np.append(self.x_e, self.y_e)])

    def transposed(self) -> "PanelObservation":
        """Swap the roles of periods and units.

        The forecasting regression predicts the post period from the pre
        periods across control units, so ``X' `` becomes the design and
        ``x_e`` the target.
        """
        other = "rows_are_units" if self.orientation == "columns_are_units" else "columns_are_units"
        return PanelObservation(self.X.T, self.x_e, self.y, self.y_e, None, other)


@dataclass(frozen=True)
class NoiseSpec:
    """Second-order structure of the noise.

    ``sigma_row`` is ``n^{-1} E eps' eps`` (p x p), ``sigma_col`` is
    ``p^{-1} E eps eps'`` (n x n) and ``sigma_nu`` the covariance of the
    pre-treatment treated noise. ``psi`` predicts ``nu_i`` from the row
    ``eps_i``; ``psi_col`` (length n) predicts the post-period element
    ``eps_ej`` from the column ``eps_.j``. ``sigma_e`` is the sd of one
    element of ``eps_e``. ``sigma_col`` and ``sigma_nu`` may be 1-d arrays,
    meaning diagonal matrices, which keeps long panels cheap.
    """

    independence_axis: str
    sigma_row: np.ndarray
    sigma_col: np.ndarray
    sigma_nu: np.ndarray
    psi: np.ndarray
    psi_col: np.ndarray
    sigma_e: float
    p_e: int = 1
    distribution: str = "gaussian"

    def __post_init__(self):
        if self.independence_axis not in ("rows", "columns"):
            raise ValueError(f"unknown independence axis {self.independence_axis!r}")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if int(self.p_e) < 1:
            raise ValueError("p_e must be a positive integer")
        if self.sigma_e < 0:
            raise ValueError("sigma_e must be nonnegative")
        mats = {}
        for name in ("sigma_row", "sigma_col", "sigma_nu"):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.ndim == 1 and name != "sigma_row":
                if np.any(M < 0):
                    raise NotPSDError(f"{name} has a negative diagonal entry")
                mats[name] = M
                object.__setattr__(self, name, M)
                continue
            M = np.atleast_2d(M)
            if M.shape[0] != M.shape[1]:
                raise DimensionError(f"{name} must be square")
            if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
                raise NotPSDError(f"{name} is not symmetric")
            mats[name] = M
            object.__setattr__(self, name, M)
        p = mats["sigma_row"].shape[0]
        n = mats["sigma_col"].shape[0]
        if mats["sigma_nu"].shape[0] != n:
            raise DimensionError("sigma_nu must match sigma_col")
        psi = np.asarray(self.psi, dtype=float).ravel()
        psi_col = np.asarray(self.psi_col, dtype=float).ravel()
        if psi.shape[0] != p:
            raise DimensionError(f"psi must have length {p}")
        if psi_col.shape[0] != n:
            raise DimensionError(f"psi_col must have length {n}")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "psi_col", psi_col)
        object.__setattr__(self, "p_e", int(self.p_e))
        object.__setattr__(self, "sigma_e", float(self.sigma_e))

    @property
    def n(self) -> int:
        return self.sigma_col.shape[0]

    @property
    def p(self) -> int:
        return self.sigma_row.shape[0]

    @property
    def sigma(self) -> float:
        """Noise level ``||Sigma_row||^{1/2}`` (operator norm)."""
        return float(np.sqrt(max(0.0, np.linalg.eigvalsh(self.sigma_row)[-1])))

    @property
    def col_residual_sd(self) -> float:
        """L2 norm of ``eps_ej - psi_col' eps_.j``."""
        v = self.sigma_e**2 - cov_quad(self.sigma_col, self.psi_col)
        return float(np.sqrt(max(0.0, v)))

    @property
    def psi_col_norm(self) -> float:
        """``||psi_col' Sigma_col^{1/2}||``."""
        return float(np.sqrt(max(0.0, cov_quad(self.sigma_col, self.psi_col))))

    @property
    def row_residual_var(self) -> float:
        """Variance of ``nu_i - psi' eps_i`` (rows mode)."""
        nu0 = self.sigma_nu[0] if self.sigma_nu.ndim == 1 else self.sigma_nu[0, 0]
        v = nu0 - self.psi @ self.sigma_row @ self.psi
        return float(max(0.0, v))

    @cached_property
    def _noise_root(self):
        if self.independence_axis == "rows":
            return psd_sqrt(self.sigma_row)
        if self.sigma_col.ndim == 1 and not np.any(self.psi_col):
            return np.sqrt(np.append(self.sigma_col, self.sigma_e**2))
        return psd_sqrt(_column_joint_cov(self))

    @classmethod
    def iid_columns(cls, n, p, sigma, p_e=1, sigma_col=None, psi_col=None, sigma_e=None,
                    distribution="gaussian"):
        """Columns iid across units with column covariance ``sigma_col``.

        Defaults to ``sigma^2 I``. The treated column is the mean of ``p_e``
        such columns, so ``sigma_nu = sigma_col / p_e`` and ``psi = 0``.
        """
        C = np.full(n, float(sigma) ** 2) if sigma_col is None else np.asarray(sigma_col, dtype=float)
        pc = np.zeros(n) if psi_col is None else np.asarray(psi_col, dtype=float)
        se = sigma if sigma_e is None else sigma_e
        return cls(
            "columns",
            sigma_row=cov_trace(C) / n * np.eye(p),
            sigma_col=C,
            sigma_nu=C / p_e,
            psi=np.zeros(p),
            psi_col=pc,
            sigma_e=se,
            p_e=p_e,
            distribution=distribution,
        )

    @classmethod
    def ar1_columns(cls, n, p, sigma, rho, p_e=1, distribution="gaussian"):
        """Stationary AR(1) columns over the ``n + 1`` periods."""
        if not -1 < rho < 1:
            raise ValueError("rho must lie in (-1, 1)")
        idx = np.arange(n + 1)
        full = sigma**2 * rho ** np.abs(idx[:, None] - idx[None, :])
        C = full[:n, :n]
        psi_col = np.linalg.solve(C, full[:n, n])
        return cls.iid_columns(n, p, sigma, p_e, C, psi_col, sigma, distribution)

    @classmethod
    def iid_rows(cls, n, sigma_row, psi=None, resid_var=0.0, p_e=1, distribution="gaussian"):
        """Rows iid across periods: ``nu_i = psi' eps_i + r_i`` with var(r_i) = resid_var."""
        S = np.asarray(sigma_row, dtype=float)
        p = S.shape[0]
        ps = np.zeros(p) if psi is None else np.asarray(psi, dtype=float)
        nu_var = float(ps @ S @ ps + resid_var)
        return cls(
            "rows",
            sigma_row=S,
            sigma_col=np.full(n, np.trace(S) / p),
            sigma_nu=np.full(n, nu_var),
            psi=ps,
            psi_col=np.zeros(n),
            sigma_e=float(np.sqrt(np.trace(S) / p)),
            p_e=p_e,
            distribution=distribution,
        )

    @classmethod
    def zero(cls, n, p, p_e=1):
        return cls.iid_columns(n, p, 0.0, p_e)


@dataclass(frozen=True)
class SignalSpec:
    """Low-rank systematic component.

    ``singular_values`` are used as given (nonincreasing, length ``rank``).
    ``misspecification`` scales a gaussian perturbation of ``(b, b_e)`` away
    from the exactly representable ``A theta*``.
    """

    rank: int
    singular_values: Sequence[float] = ()
    factor_style: str = "random_orthonormal"
    a_e_style: str = "typical_row"
    misspecification: float = 0.0

    def __post_init__(self):
        sv = np.asarray(self.singular_values, dtype=float).ravel()
        if self.rank < 0:
            raise ValueError("rank must be nonnegative")
        if sv.shape[0] != self.rank:
            raise DimensionError("need exactly one singular value per rank")
        if np.any(sv < 0) or np.any(np.diff(sv) > 0):
            raise ValueError("singular values must be nonnegative and nonincreasing")
        if self.factor_style not in FACTOR_STYLES:
            raise ValueError(f"unknown factor style {self.factor_style!r}")
        if self.a_e_style not in A_E_STYLES:
            raise ValueError(f"unknown a_e style {self.a_e_style!r}")
        object.__setattr__(self, "singular_values", tuple(float(s) for s in sv))


@dataclass(frozen=True)
class GroundTruth:
    A: np.ndarray
    b: np.ndarray
    a_e: np.ndarray
    b_e: float
    tau: float
    noise: NoiseSpec
    theta_star: Optional[np.ndarray] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n, p = A.shape
        b = np.asarray(self.b, dtype=float).ravel()
        a_e = np.asarray(self.a_e, dtype=float).ravel()
        if b.shape[0] != n or a_e.shape[0] != p:
            raise DimensionError("b and a_e must match A")
        if self.noise.n != n or self.noise.p != p:
            raise DimensionError(
                f"noise spec is for n={self.noise.n}, p={self.noise.p}; signal is {n}x{p}"
            )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a_e", a_e)
        object.__setattr__(self, "b_e", float(self.b_e))
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class LayoutConfig:
    """Which CSV columns hold what.

    ``treated`` names one column or several (the latter are treated as
    disaggregated series and averaged). ``controls`` defaults to every other
    column except ``time_column``. ``post_row`` indexes data rows (header
    excluded); rows before it are pre-treatment, later rows are ignored.
    """

    treated: Union[str, Sequence[str]]
    controls: Optional[Sequence[str]] = None
    time_column: Optional[str] = None
    post_row: int = -1
    orientation: str = "columns_are_units"

    @property
    def treated_list(self):
        return [self.treated] if isinstance(self.treated, str) else list(self.treated)


# ---------------------------------------------------------------------------
# generators


def psd_sqrt(M, tol=1e-12):
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in ``[-tol * scale, 0)`` are clamped to zero; anything more
    negative raises :class:`NotPSDError`.
    """
    M = np.asarray(M, dtype=float)
    w, Q = np.linalg.eigh(0.5 * (M + M.T))
    scale = max(1.0, np.abs(w).max()) if w.size else 1.0
    if w.size and w.min() < -tol * scale:
        raise NotPSDError(f"matrix has negative eigenvalue {w.min():.3g}")
    w = np.clip(w, 0.0, None)
    return (Q * np.sqrt(w)) @ Q.T


def _standard(rng, shape, distribution):
    if distribution == "gaussian":
        return rng.standard_normal(shape)
    r = rng.integers(0, 2, size=shape) * 2.0 - 1.0
    return (r + rng.standard_normal(shape)) / np.sqrt(2.0)


def _orthonormal(rng, m, r):
    if r == 0:
        return np.zeros((m, 0))
    Q, R = np.linalg.qr(rng.standard_normal((m, r)))
    return Q * np.sign(np.diag(R))


def _smooth_trends(n_periods, r, rng):
    t = np.linspace(0.0, 1.0, n_periods)[:, None]
    k = np.arange(1, r + 1)[None, :]
    phase = rng.uniform(0, 2 * np.pi, size=(1, r))
    return np.cos(np.pi * k * t + phase) + 0.1 * rng.standard_normal((n_periods, r))


def generate_signal(spec: SignalSpec, n: int, p: int, seed: int, return_weights=False):
    """Draw ``(A, b, a_e, b_e)`` with ``A`` having the requested singular values.

    ``b = A theta*`` and ``b_e = a_e' theta*`` for ``theta*`` uniform on the
    simplex, plus the optional misspecification perturbation.
    """
    r = spec.rank
    if r > min(n, p):
        raise DimensionError(f"rank {r} exceeds min(n, p) = {min(n, p)}")
    rng = make_rng(seed)
    sv = np.asarray(spec.singular_values, dtype=float)
    V = _orthonormal(rng, p, r)
    if spec.factor_style == "common_trends" and r > 0:
        F = _smooth_trends(n + 1, r, rng)
        Q, R = np.linalg.qr(F[:n])
        U = Q
        u_e = np.linalg.solve(R.T, F[n])
    else:
        U = _orthonormal(rng, n, r)
        u_e = rng.standard_normal(r) / np.sqrt(n)
    A = (U * sv) @ V.T
    scale = float(np.sqrt((sv**2).sum() / n))
    if spec.a_e_style == "typical_row":
        a_e = V @ (sv * u_e)
    elif spec.a_e_style == "top_singular_aligned":
        a_e = scale * V[:, 0] if r > 0 else np.zeros(p)
    else:
        z = rng.standard_normal(p)
        for _ in range(2):
            z = z - V @ (V.T @ z)
        nz = np.linalg.norm(z)
        a_e = scale * z / nz if nz > 0 else np.zeros(p)
    theta = rng.dirichlet(np.ones(p))
    b = A @ theta
    b_e = float(a_e @ theta)
    if spec.misspecification:
        b = b + spec.misspecification * rng.standard_normal(n)
        b_e += spec.misspecification * float(rng.standard_normal())
    if return_weights:
        return A, b, a_e, b_e, theta
    return A, b, a_e, b_e


def generate_truth(signal: SignalSpec, noise: NoiseSpec, tau: float, seed: int) -> GroundTruth:
    """Signal and noise models bundled for simulation."""
    A, b, a_e, b_e, th = generate_signal(signal, noise.n, noise.p, seed, return_weights=True)
    return GroundTruth(A, b, a_e, b_e, tau, noise, th)


def _column_joint_cov(noise: NoiseSpec):
    C = cov_dense(noise.sigma_col)
    c = C @ noise.psi_col
    top = np.column_stack([C, c])
    return np.vstack([top, np.append(c, noise.sigma_e**2)])


def generate_noise(noise: NoiseSpec, seed: int):
    """Draw ``(eps_full, treated_noise)``.

    ``eps_full`` is ``(n + 1) x p`` for the controls, ``treated_noise`` is
    ``(n + 1) x p_e`` for the disaggregated treated series.
    """
    rng = make_rng(seed)
    n, p, pe = noise.n, noise.p, noise.p_e
    dist = noise.distribution
    root = noise._noise_root
    if noise.independence_axis == "columns":
        if root.ndim == 1:
            eps = root[:, None] * _standard(rng, (n + 1, p), dist)
            tr = root[:, None] * _standard(rng, (n + 1, pe), dist)
        else:
            eps = root @ _standard(rng, (n + 1, p), dist)
            tr = root @ _standard(rng, (n + 1, pe), dist)
        return eps, tr
    eps = _standard(rng, (n + 1, p), dist) @ root
    resid_sd = np.sqrt(noise.row_residual_var)
    shared = eps @ noise.psi
    # each series carries the full shared part; residuals are inflated by
    # sqrt(p_e) so that their average has variance resid_var
    tr = shared[:, None] + resid_sd * np.sqrt(pe) * _standard(rng, (n + 1, pe), dist)
    return eps, tr


def generate_panel(truth: GroundTruth, seed: int) -> PanelObservation:
    """Signal plus noise plus treatment effect in the treated post cell."""
    eps, tr = generate_noise(truth.noise, seed)
    n = truth.n
    X = truth.A + eps[:n]
    x_e = truth.a_e + eps[n]
    treated_mean = np.append(truth.b, truth.b_e + truth.tau)
    series = treated_mean[:, None] + tr
    y, y_e = aggregate_treated(series)
    return PanelObservation(X, y, x_e, y_e, series)


def aggregate_treated(series):
    """Row means of the ``(n + 1) x p_e`` treated series, split into ``(y, y_e)``."""
    S = np.asarray(series, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    if S.shape[1] == 0 or S.shape[0] == 0:
        raise EmptyInputError("treated series has no columns")
    m = S.mean(axis=1)
    return m[:-1], float(m[-1])


# ---------------------------------------------------------------------------
# CSV


def load_panel_csv(path, layout: LayoutConfig) -> PanelObservation:
    """Read a time-by-unit CSV into a :class:`PanelObservation`.

    Errors carry 1-based ``(row, col)`` file coordinates with the header on
    row 1.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise CSVFormatError("empty file", 1, None)
    header = [h.strip() for h in rows[0]]
    width = len(header)
    cols = {h: i for i, h in enumerate(header)}
    treated = layout.treated_list
    for name in treated:
        if name not in cols:
            raise CSVFormatError(f"treated column {name!r} not in header", 1, None)
    if layout.controls is None:
        skip = set(treated) | ({layout.time_column} if layout.time_column else set())
        controls = [h for h in header if h not in skip]
    else:
        controls = list(layout.controls)
        for name in controls:
            if name not in cols:
                raise CSVFormatError(f"control column {name!r} not in header", 1, None)
    if not controls:
        raise CSVFormatError("no control columns", 1, None)
    needed = [cols[c] for c in controls] + [cols[t] for t in treated]
    data = np.empty((len(rows) - 1, width))
    data[:] = np.nan
    for i, r in enumerate(rows[1:]):
        line = i + 2
        if len(r) != width:
            raise CSVFormatError(f"row has {len(r)} fields, header has {width}", line, None)
        for j in needed:
            try:
                data[i, j] = float(r[j])
            except ValueError:
                raise CSVFormatError(
                    f"non-numeric cell {r[j]!r} at row {line}, column {j + 1}", line, j + 1
                ) from None
    T = data.shape[0]
    if T < 2:
        raise CSVFormatError("need at least two time rows", len(rows), None)
    post = layout.post_row if layout.post_row >= 0 else T + layout.post_row
    if not 1 <= post < T:
        raise CSVFormatError(f"post_row {layout.post_row} leaves no pre-treatment rows", None, None)
    ctrl = data[:, [cols[c] for c in controls]]
    tr = data[:, [cols[t] for t in treated]]
    series = np.vstack([tr[:post], tr[post]])
    y, y_e = aggregate_treated(series)
    panel = PanelObservation(
        ctrl[:post], y, ctrl[post], y_e, series if len(treated) > 1 else None
    )
    if layout.orientation == "rows_are_units":
        return panel.transposed()
    return panel


def write_panel_csv(panel: PanelObservation, path) -> LayoutConfig:
    """Write ``panel`` so that :func:`load_panel_csv` with the returned layout reads it back."""
    p = panel.p
    controls = [f"control_{j + 1}" for j in range(p)]
    if panel.treated_series is not None and panel.p_e > 1:
        treated = [f"treated_{k + 1}" for k in range(panel.p_e)]
        tr = panel.treated_series
    else:
        treated = ["treated"]
        tr = np.append(panel.y, panel.y_e)[:, None]
    body = np.column_stack([np.vstack([panel.X, panel.x_e]), tr])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["period"] + controls + treated)
        for t, row in enumerate(body):
            w.writerow([t] + [repr(float(v)) for v in row])
    return LayoutConfig(
        treated=treated[0] if len(treated) == 1 else treated,
        controls=controls,
        time_column="period",
        post_row=-1,
    )


# ---------------------------------------------------------------------------
# noise estimation


def estimate_noise_spec(panel: PanelObservation, method="residual_plugin",
                        known: Optional[NoiseSpec] = None) -> NoiseSpec:
    """Noise covariance for inference.

    ``known`` returns the supplied spec unchanged. ``residual_plugin``
    estimates an isotropic level from first differences of each control
    column, ``var(diff) / 2`` averaged over columns. This assumes the signal
    varies slowly over time.
    """
    if method == "known":
        if known is None:
            raise ValueError("method 'known' needs a NoiseSpec")
        return known
    if method != "residual_plugin":
        raise ValueError(f"unknown noise estimation method {method!r}")
    n, p = panel.n, panel.p
    if n < 4:
        raise ValueError("residual_plugin needs at least 4 pre-treatment periods")
    d = np.diff(panel.X, axis=0)
    s2 = float(np.mean(d.var(axis=0, ddof=1)) / 2.0)
    return NoiseSpec.iid_columns(n, p, np.sqrt(s2), p_e=panel.p_e)
