"""Gaussian widths, effective sample sizes and fixed-point rate conditions.

The rate ``s`` bounds ``||Sigma^{1/2}(theta_hat - theta_tilde)||`` and is the
smallest radius at which ``s^2`` dominates a right-hand side built from the
noise level, the effective sample size, the (approximate) rank, the oracle
fit error and the gaussian width of the localized deviation set

    Theta*_s = {theta - theta_tilde : theta in Theta,
                ||Sigma^{1/2}(theta - theta_tilde)|| <= s}.

Unknown universal constants are exposed as a single ``c`` per formula and
echoed in every report.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError
from .rng import make_rng
from .solver import ConstraintSet, SolverOptions, minimize_quadratic, project_simplex_rows

WIDTH_MODES = ("l1_bound", "euclidean_bound", "monte_carlo", "fixed")


def one_half(x):
    """``x^{1,1/2} = x + sqrt(x)``."""
    return x + math.sqrt(x)


# ---------------------------------------------------------------------------
# sets and widths


@dataclass(frozen=True)
class SetDescriptor:
    """Localized deviation set around ``center`` of radius ``radius_s``.

    ``sigma_row`` defines the metric ``||Sigma^{1/2} . ||``; ``None`` means
    the identity. ``radius_s`` may be ``inf``.
    """

    constraint: ConstraintSet
    center: np.ndarray
    radius_s: float
    sigma_row: Optional[np.ndarray] = None

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).ravel()
        object.__setattr__(self, "center", c)
        if self.radius_s < 0:
            raise ValueError("radius_s must be nonnegative")
        if not self.constraint.contains(c, tol=1e-8):
            raise ValueError("center must lie in the base constraint set")
        if self.sigma_row is not None:
            S = np.asarray(self.sigma_row, dtype=float)
            if S.ndim == 0:
                S = float(S) * np.eye(c.size)
            if S.shape != (c.size, c.size):
                raise DimensionError("sigma_row must be p x p")
            object.__setattr__(self, "sigma_row", S)

    @property
    def p(self) -> int:
        return self.center.size

    def with_radius(self, s) -> "SetDescriptor":
        return SetDescriptor(self.constraint, self.center, s, self.sigma_row)

    def isotropic_scale(self):
        """``sigma`` if the metric is ``sigma^2 I``, else ``None``."""
        if self.sigma_row is None:
            return 1.0
        S = self.sigma_row
        d = S[0, 0]
        if np.allclose(S, d * np.eye(self.p), rtol=0, atol=1e-14 * max(1.0, abs(d))) and d > 0:
            return float(np.sqrt(d))
        return None


def width_upper_bound(desc: SetDescriptor, p=None, c=1.0) -> float:
    """Analytic width bounds.

    Simplex and l1 ball: ``c sqrt(log p)``, with ``log p`` floored at 1 so
    that ``p = 1`` gives ``c``. Euclidean: ``c s sqrt(p)``, divided by
    ``sqrt(lambda_min(Sigma))`` when the metric is not the identity.
    """
    p = desc.p if p is None else float(p)
    if p < 1:
        raise ValueError("p must be positive")
    kind = desc.constraint.kind
    if kind in ("simplex", "l1_ball"):
        return float(c * math.sqrt(max(math.log(p), 1.0)))
    if kind == "euclidean":
        w = c * desc.radius_s * math.sqrt(p)
        if desc.sigma_row is not None:
            lam = float(np.linalg.eigvalsh(desc.sigma_row)[0])
            if lam <= 0:
                return math.inf
            w /= math.sqrt(lam)
        return float(w)
    raise ValueError(f"no analytic width bound for {kind!r}")


def _project_rows(kind, V, radius):
    if kind == "simplex":
        return project_simplex_rows(V, radius)
    if kind == "l1_ball":
        A = np.abs(V)
        out = V.copy()
        big = A.sum(axis=1) > radius
        if big.any():
            out[big] = np.sign(V[big]) * project_simplex_rows(A[big], radius)
        return out
    if kind == "nonnegative":
        return np.maximum(V, 0.0)
    return V.copy()


def _lp_value(kind, G, center, radius):
    if kind == "simplex":
        return G.max(axis=1) - G @ center
    if kind == "l1_ball":
        return radius * np.abs(G).max(axis=1) - G @ center
    return np.full(G.shape[0], np.inf)


def _sup_isotropic(desc, G, r, iters=200):
    """Exact batched supremum over ``Theta`` intersected with a ball of radius ``r``.

    For multiplier ``mu`` the maximizer is ``P(center + g / mu)``; its
    distance to the center decreases in ``mu``, so bisection on ``log mu``
    finds the multiplier where the ball constraint binds.
    """
    kind = desc.constraint.kind
    rad = desc.constraint.radius
    c = desc.center
    m = G.shape[0]
    gn = np.linalg.norm(G, axis=1)
    if kind == "euclidean":
        return r * gn, np.zeros(m, dtype=bool)
    out = np.empty(m)
    flagged = np.zeros(m, dtype=bool)
    # LP solution, if unique and inside the ball, is the answer
    if kind in ("simplex", "l1_ball"):
        if kind == "simplex":
            idx = G.argmax(axis=1)
            vert = np.zeros_like(G)
            vert[np.arange(m), idx] = 1.0
        else:
            idx = np.abs(G).argmax(axis=1)
            vert = np.zeros_like(G)
            vert[np.arange(m), idx] = rad * np.sign(G[np.arange(m), idx])
        inside = np.linalg.norm(vert - c, axis=1) <= r
        out[inside] = ((vert - c) * G).sum(axis=1)[inside]
        todo = ~inside
    else:
        todo = np.ones(m, dtype=bool)
    if not todo.any():
        return out, flagged
    Gt = G[todo]
    scale = np.maximum(gn[todo], 1e-300)
    lo = np.log(scale / max(r, 1e-300)) - 40.0
    hi = np.log(scale / max(r, 1e-300)) + 40.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        X = _project_rows(kind, c + Gt / np.exp(mid)[:, None], rad)
        d = np.linalg.norm(X - c, axis=1)
        far = d > r
        lo = np.where(far, mid, lo)
        hi = np.where(far, hi, mid)
        if np.max(hi - lo) < 1e-13:
            break
    X = _project_rows(kind, c + Gt / np.exp(hi)[:, None], rad)
    d = np.linalg.norm(X - c, axis=1)
    val = ((X - c) * Gt).sum(axis=1)
    bad = d > r * (1 + 1e-8) + 1e-12
    out[todo] = val
    flagged[np.flatnonzero(todo)[bad]] = True
    return out, flagged


def _sup_general(desc, G, s, tol=1e-8):
    """Supremum under a general metric via the Lagrangian in ``mu``.

    For each ``mu`` the inner problem ``max g'd - mu/2 d' S d`` over the
    shifted base set is a convex quadratic program.
    """
    S = desc.sigma_row
    c = desc.center
    cons = desc.constraint
    kind = cons.kind
    m = G.shape[0]
    out = np.empty(m)
    flagged = np.zeros(m, dtype=bool)
    if kind == "euclidean":
        w, Q = np.linalg.eigh(S)
        for i, g in enumerate(G):
            z = Q.T @ g
            if np.any((w <= 1e-14 * max(1.0, w.max())) & (np.abs(z) > 0)):
                out[i] = np.inf
            else:
                out[i] = s * np.sqrt(np.sum(z[w > 0] ** 2 / w[w > 0]))
        return out, flagged
    opts = SolverOptions(tol=1e-10, max_iter=20000)

    def inner(g, mu, x0):
        # min mu/2 (x-c)'S(x-c) - g'x  ->  x'Hx - 2h'x with H = mu S / 2
        H = 0.5 * mu * S
        h = 0.5 * (g + mu * (S @ c))
        x, _ = minimize_quadratic(H, h, cons, x0, opts)
        d = x - c
        return x, float(np.sqrt(max(0.0, d @ S @ d)))

    for i, g in enumerate(G):
        gn = max(np.linalg.norm(g), 1e-300)
        lo, hi = math.log(gn / max(s, 1e-300)) - 30.0, math.log(gn / max(s, 1e-300)) + 30.0
        x_hi, d_hi = inner(g, math.exp(lo), None)
        if d_hi <= s:
            out[i] = float(g @ (x_hi - c))
            continue
        x = None
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            x, d = inner(g, math.exp(mid), x)
            if d > s:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-10:
                break
        x, d = inner(g, math.exp(hi), x)
        out[i] = float(g @ (x - c))
        if d > s * (1 + 1e-6) + tol:
            flagged[i] = True
    return out, flagged


def width_monte_carlo(desc: SetDescriptor, n_samples: int, seed: int, return_samples=False):
    """Monte Carlo estimate of ``E sup_{d in Theta*_s} g'd`` with its standard error.

    Raises
    ------
    RuntimeError
        If more than 10% of the inner maximizations fail to converge.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    s = float(desc.radius_s)
    if s == 0:
        return (0.0, 0.0, np.zeros(n_samples)) if return_samples else (0.0, 0.0)
    rng = make_rng(seed)
    G = rng.standard_normal((n_samples, desc.p))
    kind = desc.constraint.kind
    if math.isinf(s):
        vals = _lp_value(kind, G, desc.center, desc.constraint.radius)
        flagged = np.zeros(n_samples, dtype=bool)
    else:
        sc = desc.isotropic_scale()
        if sc is not None:
            vals, flagged = _sup_isotropic(desc, G, s / sc)
        else:
            vals, flagged = _sup_general(desc, G, s)
    if flagged.mean() > 0.1:
        raise RuntimeError(f"{int(flagged.sum())} of {n_samples} width samples did not converge")
    keep = vals[~flagged]
    est = float(keep.mean())
    se = float(keep.std(ddof=1) / math.sqrt(keep.size)) if keep.size > 1 else 0.0
    if return_samples:
        return est, se, vals
    return est, se


# ---------------------------------------------------------------------------
# effective sample size


def effective_sample_size(theta_tilde, p_e) -> float:
    """``1 / (1/p_e + ||theta_tilde||^2)``."""
    if p_e <= 0:
        raise ValueError("p_e must be positive")
    t = np.asarray(theta_tilde, dtype=float).ravel()
    return float(1.0 / (1.0 / p_e + t @ t))


def _opnorm(M):
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return float(M.max())
    M = np.atleast_2d(M)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])


def effective_sample_size_general(mode, refined=False, *, theta_tilde=None, sigma_row=None,
                                  psi=None, resid_l2=None, sigma_col=None, sigma_nu=None) -> float:
    """Effective sample size from the rows or columns table.

    rows:     ``p_eff^{-1/2} = ||S||^{-1/2} (||S^{1/2}(theta - psi)|| + resid_l2)``
    columns:  ``p_eff^{-1/2} = ||theta|| + ||Sigma_col||^{-1/2} ||Sigma_nu||^{1/2}``

    With ``refined=True`` the normalizing ``||.||^{-1/2}`` factors are dropped
    (rows) or moved onto ``||theta||`` (columns). Returns ``inf`` when the
    inverse root is zero.
    """
    if theta_tilde is None:
        raise ValueError("theta_tilde is required")
    th = np.asarray(theta_tilde, dtype=float).ravel()
    if mode == "rows":
        if sigma_row is None or resid_l2 is None:
            raise ValueError("rows mode needs sigma_row and resid_l2")
        S = np.asarray(sigma_row, dtype=float)
        ps = np.zeros_like(th) if psi is None else np.asarray(psi, dtype=float).ravel()
        d = th - ps
        x = math.sqrt(max(0.0, d @ S @ d)) + float(resid_l2)
        if not refined:
            nS = _opnorm(S)
            x = x / math.sqrt(nS) if nS > 0 else math.inf
    elif mode == "columns":
        if sigma_col is None or sigma_nu is None:
            raise ValueError("columns mode needs sigma_col and sigma_nu")
        nc = _opnorm(sigma_col)
        nn = max(0.0, _opnorm(sigma_nu))
        if refined:
            x = math.sqrt(max(nc, 0.0)) * float(np.linalg.norm(th)) + math.sqrt(nn)
        else:
            x = float(np.linalg.norm(th)) + (math.sqrt(nn / nc) if nc > 0 else (math.inf if nn > 0 else 0.0))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if x == 0:
        return math.inf
    return 1.0 / x**2


# ---------------------------------------------------------------------------
# fixed points


@dataclass(frozen=True)
class SimplifiedRateParams:
    """Inputs to the simplified fixed-point condition.

    ``width_mode`` selects ``c_w sqrt(log p)`` (``l1_bound``), ``c_w s sqrt(p)``
    (``euclidean_bound``), a Monte Carlo width of ``set_descriptor`` at each
    radius (``monte_carlo``) or a constant ``width_value`` (``fixed``).
    """

    n: int
    p: int
    sigma: float
    p_eff: float
    rank_or_R: int
    oracle_error: float = 0.0
    eta: float = 1.0
    v: float = 1.0
    c: float = 1.0
    width_mode: str = "l1_bound"
    width_c: float = 1.0
    width_value: Optional[float] = None
    set_descriptor: Optional[SetDescriptor] = None
    mc_samples: int = 200
    mc_seed: int = 0
    sigma_convention: str = "row_operator_norm"

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be positive")
        if self.sigma < 0 or self.oracle_error < 0 or self.rank_or_R < 0:
            raise ValueError("sigma, oracle_error and rank must be nonnegative")
        if not self.p_eff > 0:
            raise ValueError("p_eff must be positive")
        if self.v < 1:
            raise ValueError("v must be at least 1")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.width_mode not in WIDTH_MODES:
            raise ValueError(f"unknown width mode {self.width_mode!r}")
        if self.width_mode == "monte_carlo" and self.set_descriptor is None:
            raise ValueError("monte_carlo width needs a set_descriptor")
        if self.width_mode == "fixed" and self.width_value is None:
            raise ValueError("fixed width needs width_value")


@dataclass(frozen=True)
class RefinedRateParams(SimplifiedRateParams):
    """Refined condition inputs.

    ``width_sigma`` is a constant ``width_Sigma`` or ``None`` to use
    ``sigma * width``. ``singular_values`` enables joint selection of the
    approximate rank ``R``; otherwise ``rank_or_R`` is used as is.
    """

    K: float = 1.0
    phi: float = 1.0
    width_sigma: Optional[float] = None
    p_eff_sigma: Optional[float] = None
    singular_values: Optional[Sequence[float]] = None

    def __post_init__(self):
        super().__post_init__()
        if self.K < 1 or self.phi < 1:
            raise ValueError("K and phi must be at least 1")
        if self.p_eff_sigma is not None and not self.p_eff_sigma > 0:
            raise ValueError("p_eff_sigma must be positive")


@dataclass(frozen=True)
class RateReport:
    s_star: Optional[float]
    prediction_bound: Optional[float]
    eta_R_sq: float
    R_used: int
    solvable: bool
    probability_exponent: Optional[float]
    width_used: Optional[float] = None
    reason: str = ""
    mode: str = "simplified"
    width_mode: str = "l1_bound"
    constants: dict = field(default_factory=dict)
    sigma_convention: str = "row_operator_norm"

    def __post_init__(self):
        if not self.solvable and self.s_star is not None:
            raise ValueError("an unsolvable report carries no s_star")

    def to_dict(self):
        return asdict(self)


def _width_fn(params: SimplifiedRateParams):
    """``(width(s), constant?)``."""
    mode = params.width_mode
    if mode == "l1_bound":
        w = params.width_c * math.sqrt(max(math.log(params.p), 1.0))
        return (lambda s: w), True
    if mode == "fixed":
        w = float(params.width_value)
        return (lambda s: w), True
    if mode == "euclidean_bound":
        k = params.width_c * math.sqrt(params.p)
        return (lambda s: k * s), False
    desc = params.set_descriptor
    cache = {}

    def mc(s):
        if s not in cache:
            cache[s] = width_monte_carlo(desc.with_radius(s), params.mc_samples, params.mc_seed)[0]
        return cache[s]

    return mc, False


def _eta_R_sq_simplified(params):
    return max(0.0, params.eta**2 - params.c * params.rank_or_R / params.n)


def _rhs_simplified(params, eR2, w):
    n, sig, v, c = params.n, params.sigma, params.v, params.c
    R, pe = params.rank_or_R, params.p_eff
    t1 = v**2 * sig**2 * w**2 / (min(eR2, eR2**2) * n)
    t2 = one_half(v**2 * sig**2 * R / pe) / (eR2 * n)
    t3 = (v * sig * params.oracle_error * w + v * sig**2 * math.sqrt(n / pe) * w) / (eR2 * n)
    return c * (t1 + t2 + t3)


def _smallest_root(h, lo=1e-12, hi=1e6, rtol=1e-10):
    """Smallest ``s`` in ``[lo, hi]`` with ``h(s) >= 0`` (log-grid scan, then bisection)."""
    if h(lo) >= 0:
        return lo
    grid = np.geomspace(lo, hi, 121)
    prev = lo
    for s in grid[1:]:
        if h(s) >= 0:
            a, b = prev, s
            while b - a > rtol * b:
                mid = 0.5 * (a + b)
                if h(mid) >= 0:
                    b = mid
                else:
                    a = mid
            return b
        prev = s
    return None


def _sq(x):
    return x * x


def _exponent(v, sig_w_sq_over_s2, R, n):
    return float(min(sig_w_sq_over_s2 * v**2, v**2 * R, n))


def solve_fixed_point(params: SimplifiedRateParams) -> RateReport:
    """Smallest ``s > 0`` with ``s^2 >= RHS(s)`` for the simplified condition."""
    eR2 = _eta_R_sq_simplified(params)
    consts = {"c": params.c, "width_c": params.width_c, "v": params.v}
    common = dict(eta_R_sq=eR2, R_used=params.rank_or_R, mode="simplified",
                  width_mode=params.width_mode, constants=consts,
                  sigma_convention=params.sigma_convention)
    if eR2 <= 0:
        return RateReport(None, None, solvable=False, probability_exponent=None,
                          reason="eta_R vanished", **common)
    wf, constant = _width_fn(params)
    if constant:
        w = wf(1.0)
        s = math.sqrt(_rhs_simplified(params, eR2, w))
    elif params.width_mode == "euclidean_bound":
        k = params.width_c * math.sqrt(params.p)
        # s^2 >= a s^2 + b s + d
        d = _rhs_simplified(params, eR2, 0.0)
        n, sig, v, c = params.n, params.sigma, params.v, params.c
        a = c * v**2 * sig**2 * k**2 / (min(eR2, eR2**2) * n)
        b = c * (v * sig * params.oracle_error + v * sig**2 * math.sqrt(n / params.p_eff)) * k / (eR2 * n)
        if a >= 1.0:
            return RateReport(None, None, solvable=False, probability_exponent=None,
                              reason="width grows as fast as s", **common)
        s = (b + math.sqrt(b * b + 4.0 * (1.0 - a) * d)) / (2.0 * (1.0 - a))
        w = k * s
    else:
        s = _smallest_root(lambda t: t * t - _rhs_simplified(params, eR2, wf(t)))
        if s is None:
            return RateReport(None, None, solvable=False, probability_exponent=None,
                              reason="no fixed point below 1e6", **common)
        w = wf(s)
    u = _exponent(params.v, _sq(params.sigma * w / s) if s > 0 else math.inf,
                  params.rank_or_R, params.n)
    return RateReport(s, params.eta * math.sqrt(params.n) * s, solvable=True,
                      probability_exponent=u, width_used=w, **common)


def rhs_simplified(params: SimplifiedRateParams, s: float) -> float:
    """Right-hand side of the simplified condition at radius ``s``."""
    eR2 = _eta_R_sq_simplified(params)
    if eR2 <= 0:
        return math.inf
    return _rhs_simplified(params, eR2, _width_fn(params)[0](s))


def _rhs_refined(params: RefinedRateParams, R, eR2, w_sig, p_eff_sig):
    n, v, c, K, phi = params.n, params.v, params.c, params.K, params.phi
    t1 = K**4 * v**2 * w_sig**2 * (1.0 + phi * math.sqrt(R / n)) ** 2 / (eR2**2 * n)
    t2 = K**2 * v**2 * w_sig**2 / (eR2 * n)
    t3 = (K * v * params.oracle_error * w_sig
          + K**2 * v * math.sqrt(n / p_eff_sig) * w_sig
          + one_half(K**2 * v**2 * R / p_eff_sig)) / (eR2 * n)
    return c * (t1 + t2 + t3)


def solve_fixed_point_refined(params: RefinedRateParams) -> RateReport:
    """Refined condition with joint choice of ``R`` when singular values are given."""
    wf, constant = _width_fn(params)
    p_eff_sig = params.p_eff_sigma if params.p_eff_sigma is not None else params.p_eff / params.sigma**2
    consts = {"c": params.c, "width_c": params.width_c, "v": params.v,
              "K": params.K, "phi": params.phi}

    def wsig(s):
        return params.width_sigma if params.width_sigma is not None else params.sigma * wf(s)

    if params.singular_values is not None:
        sv = np.asarray(params.singular_values, dtype=float)
        candidates = range(int(np.sum(sv > 0)) + 1)
    else:
        sv = None
        candidates = [params.rank_or_R]

    def sigma_next(R):
        return float(sv[R]) if sv is not None and R < sv.size else 0.0

    best = None
    for R in candidates:
        eR2 = max(0.0, params.eta**2 - params.c * params.K**2 * params.phi**2 * R / params.n)
        if eR2 <= 0:
            continue

        def ok(s, R=R, eR2=eR2):
            fp = s * s - _rhs_refined(params, R, eR2, wsig(s), p_eff_sig)
            sn = sigma_next(R)
            if sn > 0:
                rc = R - params.c * sn * wf(s) / (params.phi * s + params.v / math.sqrt(p_eff_sig))
                return min(fp, rc)
            return fp

        if constant and params.width_mode != "monte_carlo" and sigma_next(R) == 0:
            s = math.sqrt(_rhs_refined(params, R, eR2, wsig(1.0), p_eff_sig))
        else:
            s = _smallest_root(ok)
        if s is not None and (best is None or s < best[0]):
            best = (s, R, eR2)
    common = dict(mode="refined", width_mode=params.width_mode, constants=consts,
                  sigma_convention=params.sigma_convention)
    if best is None:
        R0 = candidates[0] if sv is None else int(np.sum(sv > 0))
        eR2 = max(0.0, params.eta**2 - params.c * params.K**2 * params.phi**2 * R0 / params.n)
        reason = "eta_R vanished" if eR2 <= 0 else "no fixed point below 1e6"
        return RateReport(None, None, eR2, R0, False, None, reason=reason, **common)
    s, R, eR2 = best
    ws = wsig(s)
    u = _exponent(params.v, _sq(ws / (params.phi**2 * s)) if s > 0 else math.inf, R, params.n)
    return RateReport(s, params.eta * math.sqrt(params.n) * s, eR2, R, True, u,
                      width_used=ws, **common)
