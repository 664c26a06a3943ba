"""Constrained Tikhonov-regularized least squares.

Minimizes

    ||theta0 + M theta - t||^2 + coeff * ||Sigma^{1/2} (theta - psi)||^2

over ``Theta0 x Theta`` where ``Theta`` is one of a few convex sets with cheap
Euclidean projections. ``coeff`` is ``n (eta^2 - 1)`` for the feasible
(empirical) estimator and ``n eta^2`` for the oracle that minimizes the
expected loss. The algorithm is accelerated projected gradient with a
function-value restart that keeps the objective nonincreasing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, EmptyInputError, InfeasibleError, UnboundedProblemError

CONSTRAINT_KINDS = ("simplex", "l1_ball", "nonnegative", "euclidean")


def project_simplex(v, radius=1.0):
    """Euclidean projection onto ``{w >= 0, sum(w) = radius}``.

    Sort-based exact algorithm: the projection is ``max(v - lam, 0)`` for the
    unique threshold ``lam`` making the entries sum to ``radius``.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise EmptyInputError("project_simplex needs a nonempty 1-d vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - radius
    k = np.arange(1, v.size + 1)
    cond = u - css / k > 0
    rho = k[cond][-1]
    lam = css[rho - 1] / rho
    return np.maximum(v - lam, 0.0)


def project_simplex_rows(V, radius=1.0):
    """Row-wise simplex projection of a 2-d array."""
    V = np.asarray(V, dtype=float)
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - radius
    k = np.arange(1, V.shape[1] + 1)
    cond = U - css / k > 0
    rho = V.shape[1] - np.argmax(cond[:, ::-1], axis=1)
    lam = css[np.arange(V.shape[0]), rho - 1] / rho
    return np.maximum(V - lam[:, None], 0.0)


def project_l1_ball(v, radius=1.0):
    """Euclidean projection onto ``{w : ||w||_1 <= radius}``."""
    if radius <= 0:
        raise ValueError(f"l1 radius must be positive, got {radius}")
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise EmptyInputError("project_l1_ball needs a nonempty 1-d vector")
    if np.abs(v).sum() <= radius:
        return v.copy()
    return np.sign(v) * project_simplex(np.abs(v), radius)


@dataclass(frozen=True)
class ConstraintSet:
    """Feasible set for the weights.

    ``kind`` is one of ``simplex``, ``l1_ball``, ``nonnegative``, ``euclidean``.
    ``radius`` only matters for ``l1_ball``.
    """

    kind: str = "simplex"
    radius: float = 1.0
    dim: Optional[int] = None

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "l1_ball" and not self.radius > 0:
            raise ValueError("l1_ball radius must be positive")

    @classmethod
    def parse(cls, text: str) -> "ConstraintSet":
        """Parse the CLI form: ``simplex``, ``l1:RADIUS``, ``nonneg``, ``euclidean``."""
        text = text.strip().lower()
        if text == "simplex":
            return cls("simplex")
        if text in ("nonneg", "nonnegative"):
            return cls("nonnegative")
        if text == "euclidean":
            return cls("euclidean")
        if text.startswith("l1"):
            _, _, r = text.partition(":")
            return cls("l1_ball", float(r) if r else 1.0)
        raise ValueError(f"cannot parse constraint {text!r}")

    def to_string(self) -> str:
        return {"simplex": "simplex", "nonnegative": "nonneg", "euclidean": "euclidean"}.get(
            self.kind, f"l1:{self.radius:g}"
        )

    @property
    def compact(self) -> bool:
        return self.kind in ("simplex", "l1_ball")

    def project(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "simplex":
            return project_simplex(v)
        if self.kind == "l1_ball":
            return project_l1_ball(v, self.radius)
        if self.kind == "nonnegative":
            return np.maximum(v, 0.0)
        return v.copy()

    def contains(self, v, tol=1e-10) -> bool:
        v = np.asarray(v, dtype=float)
        if self.kind == "simplex":
            return bool(v.min() >= -max(tol, 1e-12) and abs(v.sum() - 1.0) <= tol)
        if self.kind == "l1_ball":
            return bool(np.abs(v).sum() <= self.radius * (1 + tol) + tol)
        if self.kind == "nonnegative":
            return bool(v.min() >= -tol)
        return bool(np.all(np.isfinite(v)))


@dataclass(frozen=True)
class ProblemSpec:
    """One instance of the regularized least squares problem.

    ``design``/``target`` are ``(X, y)`` for the feasible estimator or
    ``(A, b)`` for the oracle. ``reg_coefficient`` overrides the
    mode-derived penalty coefficient when given.
    """

    design: np.ndarray
    target: np.ndarray
    sigma_row: np.ndarray
    psi: Optional[np.ndarray] = None
    eta: float = 1.0
    mode: str = "empirical"
    intercept: bool = False
    constraint: ConstraintSet = field(default_factory=ConstraintSet)
    reg_coefficient: Optional[float] = None

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.design, dtype=float))
        t = np.asarray(self.target, dtype=float).ravel()
        n, p = M.shape
        S = np.asarray(self.sigma_row, dtype=float)
        if S.ndim == 0:
            S = float(S) * np.eye(p)
        psi = np.zeros(p) if self.psi is None else np.asarray(self.psi, dtype=float).ravel()
        if t.shape[0] != n:
            raise DimensionError(f"target has length {t.shape[0]}, design has {n} rows")
        if S.shape != (p, p):
            raise DimensionError(f"sigma_row must be {p}x{p}, got {S.shape}")
        if psi.shape[0] != p:
            raise DimensionError(f"psi must have length {p}, got {psi.shape[0]}")
        if self.constraint.dim is not None and self.constraint.dim != p:
            raise DimensionError("constraint dimension does not match design")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.mode not in ("empirical", "oracle"):
            raise ValueError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "design", M)
        object.__setattr__(self, "target", t)
        object.__setattr__(self, "sigma_row", S)
        object.__setattr__(self, "psi", psi)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    @property
    def coefficient(self) -> float:
        if self.reg_coefficient is not None:
            return float(self.reg_coefficient)
        if self.mode == "oracle":
            return self.n * self.eta**2
        return self.n * (self.eta**2 - 1.0)

    def replace(self, **changes) -> "ProblemSpec":
        return dataclasses.replace(self, **changes)

    def loss(self, theta, theta0=0.0) -> float:
        theta = np.asarray(theta, dtype=float)
        r = theta0 + self.design @ theta - self.target
        d = theta - self.psi
        return float(r @ r + self.coefficient * (d @ self.sigma_row @ d))

    def gradient(self, theta, theta0=0.0):
        """Gradient ``(d/dtheta0, d/dtheta)`` evaluated from the raw data."""
        theta = np.asarray(theta, dtype=float)
        r = theta0 + self.design @ theta - self.target
        g = 2.0 * (self.design.T @ r + self.coefficient * (self.sigma_row @ (theta - self.psi)))
        return 2.0 * r.sum(), g


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 100_000
    record_history: bool = False
    vertex_polish_max_p: int = 20
    check_every: int = 5


@dataclass(frozen=True)
class FitResult:
    theta0: float
    theta: np.ndarray
    loss: float
    optimality_residual: float
    iterations: int
    converged: bool
    convexity_certificate: str
    history: Optional[tuple] = None


class _Quadratic:
    """theta' H theta - 2 h' theta + c0 after profiling out the intercept."""

    @classmethod
    def from_matrices(cls, H, h, c0=0.0):
        q = cls.__new__(cls)
        q.H = 0.5 * (H + H.T)
        q.h = np.asarray(h, dtype=float)
        q.c0 = float(c0)
        q._set_spectrum()
        return q

    def __init__(self, problem: ProblemSpec):
        M, t = problem.design, problem.target
        if problem.intercept:
            self.m_mean = M.mean(axis=0)
            self.t_mean = t.mean()
            M = M - self.m_mean
            t = t - self.t_mean
        coeff = problem.coefficient
        S, psi = problem.sigma_row, problem.psi
        Spsi = S @ psi
        self.H = M.T @ M + coeff * S
        self.H = 0.5 * (self.H + self.H.T)
        self.h = M.T @ t + coeff * Spsi
        self.c0 = float(t @ t + coeff * (psi @ Spsi))
        self._set_spectrum()

    def _set_spectrum(self):
        eig = np.linalg.eigvalsh(self.H)
        self.lam_min, self.lam_max = float(eig[0]), float(eig[-1])
        scale = max(abs(self.lam_min), abs(self.lam_max))
        self.L = 2.0 * scale if scale > 0 else 1.0

    def value(self, x):
        return float(x @ (self.H @ x) - 2.0 * (self.h @ x) + self.c0)

    def grad(self, x):
        return 2.0 * (self.H @ x - self.h)


def _gap(constraint: ConstraintSet, x, g, L):
    """Variational-inequality gap (compact sets) or gradient-mapping norm."""
    if constraint.kind == "simplex":
        return max(0.0, float(g @ x - g.min()))
    if constraint.kind == "l1_ball":
        return max(0.0, float(constraint.radius * np.abs(g).max() + g @ x))
    step = x - constraint.project(x - g / L)
    return float(L * np.linalg.norm(step))


def _intercept_for(problem: ProblemSpec, theta) -> float:
    if not problem.intercept:
        return 0.0
    return float(np.mean(problem.target - problem.design @ theta))


def _apg(q: _Quadratic, constraint: ConstraintSet, x0, opts: SolverOptions, history):
    # Loss changes are computed as d'(H(x+z) - 2h), which avoids cancellation
    # against the constant term and keeps the monotonicity test meaningful near
    # the optimum.
    L = q.L
    x = x0
    Hx = q.H @ x
    fx = q.value(x)
    y = x.copy()
    t = 1.0
    it = 0
    if history is not None:
        history.append(fx)
    for it in range(1, opts.max_iter + 1):
        z = constraint.project(y - 2.0 * (q.H @ y - q.h) / L)
        Hz = q.H @ z
        change = float((z - x) @ (Hx + Hz - 2.0 * q.h))
        stalled = False
        if change > 0:
            t = 1.0
            z = constraint.project(x - 2.0 * (Hx - q.h) / L)
            Hz = q.H @ z
            change = float((z - x) @ (Hx + Hz - 2.0 * q.h))
            if change >= 0:
                z, Hz, change, stalled = x, Hx, 0.0, True
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = z + ((t - 1.0) / t_next) * (z - x)
        x, Hx, t = z, Hz, t_next
        fx += change
        if history is not None:
            history.append(fx)
        if stalled or it % opts.check_every == 0:
            gap = _gap(constraint, x, 2.0 * (Hx - q.h), L)
            if gap <= opts.tol * (1.0 + abs(fx)) or stalled:
                break
    return x, it


def _polish(q: _Quadratic, constraint: ConstraintSet, x):
    """Solve the equality-constrained quadratic on the current support of ``x``.

    Returns the candidate or ``None`` when it leaves the set or the face.
    """
    kind = constraint.kind
    if kind == "euclidean":
        S = np.ones(x.size, dtype=bool)
        E = np.zeros((0, x.size))
        rhs_e = np.zeros(0)
    else:
        S = np.abs(x) > 1e-13 * max(1.0, constraint.radius if constraint.compact else 1.0)
        if not S.any():
            return None
        k = int(S.sum())
        E = np.zeros((0, k))
        rhs_e = np.zeros(0)
        if kind == "simplex":
            E = np.ones((1, k))
            rhs_e = np.array([constraint.radius])
        elif kind == "l1_ball" and np.abs(x).sum() >= constraint.radius * (1.0 - 1e-9):
            E = np.sign(x[S])[None, :]
            rhs_e = np.array([constraint.radius])
    HS = q.H[np.ix_(S, S)]
    m = E.shape[0]
    K = np.block([[HS, E.T], [E, np.zeros((m, m))]])
    rhs = np.concatenate([q.h[S], rhs_e])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    cand = np.zeros_like(x)
    cand[S] = sol[: int(S.sum())]
    if kind in ("simplex", "nonnegative") and np.any(cand < 0):
        return None
    if kind == "l1_ball":
        if np.any(np.sign(cand[S]) != np.sign(x[S])):
            return None
        if np.abs(cand).sum() > constraint.radius * (1.0 + 1e-12):
            return None
    return cand


def _minimize(q: _Quadratic, constraint: ConstraintSet, x0, opts: SolverOptions, history):
    """Accelerated projected gradient alternated with support polishing."""
    L = q.L
    x, iters = _apg(q, constraint, x0, opts, history)
    for _ in range(20):
        fx = q.value(x)
        gap = _gap(constraint, x, q.grad(x), L)
        cand = _polish(q, constraint, x)
        if cand is not None:
            fc = q.value(cand)
            gc = _gap(constraint, cand, q.grad(cand), L)
            if gc < gap and fc <= fx + 1e-12 * (1.0 + abs(fx)):
                x, fx, gap = cand, fc, gc
                if history is not None:
                    history.append(fc)
        if gap <= opts.tol * (1.0 + abs(fx)) or iters >= opts.max_iter:
            break
        rest = SolverOptions(opts.tol, opts.max_iter - iters, False,
                             opts.vertex_polish_max_p, opts.check_every)
        h2 = [] if history is not None else None
        x_new, more = _apg(q, constraint, x, rest, h2)
        iters += more
        if history is not None:
            history.extend(h2[1:])
        if more <= 1 and cand is None:
            x = x_new
            break
        x = x_new
    return x, iters


def minimize_quadratic(H, h, constraint: ConstraintSet, x0=None, opts=None):
    """Minimize ``x' H x - 2 h' x`` over ``constraint`` for PSD ``H``.

    Returns ``(x, gap)`` where ``gap`` is the optimality certificate.
    """
    opts = opts or SolverOptions()
    q = _Quadratic.from_matrices(np.asarray(H, dtype=float), h)
    start = constraint.project(np.zeros(q.h.size) if x0 is None else x0)
    x, _ = _minimize(q, constraint, start, opts, None)
    return x, _gap(constraint, x, q.grad(x), q.L)


def solve(problem: ProblemSpec, opts: Optional[SolverOptions] = None) -> FitResult:
    """Minimize the regularized loss of ``problem`` over its constraint set.

    Returns a :class:`FitResult`; hitting the iteration cap yields
    ``converged=False`` rather than an exception.

    Raises
    ------
    UnboundedProblemError
        If the quadratic is indefinite and the constraint set is unbounded.
    """
    opts = opts or SolverOptions()
    q = _Quadratic(problem)
    cons = problem.constraint
    indefinite = q.lam_min < -1e-10 * max(1.0, abs(q.lam_max))
    if indefinite and not cons.compact:
        raise UnboundedProblemError(
            f"Hessian has eigenvalue {q.lam_min:.3g} < 0 on the unbounded set {cons.kind!r}"
        )
    p = problem.p
    history = [] if opts.record_history else None
    x, iters = _minimize(q, cons, cons.project(np.zeros(p)), opts, history)

    if indefinite and cons.kind == "simplex" and p <= opts.vertex_polish_max_p:
        vert = np.diag(q.H) - 2.0 * q.h + q.c0
        i = int(np.argmin(vert))
        if vert[i] < q.value(x) - 1e-12 * (1.0 + abs(vert[i])):
            e = np.zeros(p)
            e[i] = 1.0
            h2 = [] if history is not None else None
            x2, more = _minimize(q, cons, e, opts, h2)
            iters += more
            if q.value(x2) <= q.value(x):
                x = x2
                if history is not None:
                    history.extend(h2)

    theta0 = _intercept_for(problem, x)
    loss = problem.loss(x, theta0)
    resid = _residual(problem, x, theta0, q.L)
    return FitResult(
        theta0=theta0,
        theta=x,
        loss=loss,
        optimality_residual=resid,
        iterations=iters,
        converged=bool(resid <= opts.tol * (1.0 + abs(loss))),
        convexity_certificate="indefinite_detected" if indefinite else "convex",
        history=tuple(history) if history is not None else None,
    )


def _residual(problem: ProblemSpec, theta, theta0, L):
    g0, g = problem.gradient(theta, theta0)
    r = _gap(problem.constraint, theta, g, L)
    if problem.intercept:
        r += abs(g0)
    return r


def optimality_residual(fit: FitResult, problem: ProblemSpec) -> float:
    """First-order optimality gap of ``fit`` for ``problem``.

    On the simplex and the l1 ball this is ``max_{theta in Theta} -g'(theta - fit.theta)``
    clipped at zero, computed exactly over the vertices. On the unbounded sets it is
    the norm of the projected-gradient mapping with step ``1/L``. Zero certifies the
    variational inequality that characterizes the minimizer.
    """
    theta = np.asarray(fit.theta, dtype=float)
    if theta.shape != (problem.p,):
        raise DimensionError("fit.theta does not match the problem dimension")
    if not problem.constraint.contains(theta, tol=1e-8):
        raise InfeasibleError("fit.theta lies outside the constraint set")
    L = _Quadratic(problem).L
    return _residual(problem, theta, fit.theta0 if problem.intercept else 0.0, L)


def solve_oracle(A, b, sigma_row, psi=None, eta=1.0, constraint=None, intercept=False,
                 opts=None) -> FitResult:
    """Minimizer of the expected loss, i.e. the oracle weights."""
    problem = ProblemSpec(A, b, sigma_row, psi, eta, "oracle", intercept,
                          constraint or ConstraintSet())
    return solve(problem, opts)


def excess_loss_identity_check(problem: ProblemSpec, theta_tilde, delta, eps, nu):
    """Evaluate both sides of the excess-loss expansion around ``theta_tilde``.

    ``lhs`` is ``loss(theta_tilde + delta) - loss(theta_tilde)`` evaluated directly.
    ``rhs`` is the expansion into a quadratic term, an oracle first-order bracket
    and four noise cross terms, computed from ``A = X - eps`` and ``b = y - nu``.
    The two agree up to roundoff for any inputs.
    """
    if problem.intercept:
        raise ValueError("the expansion is stated without intercept")
    X, y = problem.design, problem.target
    eps = np.asarray(eps, dtype=float)
    nu = np.asarray(nu, dtype=float).ravel()
    tt = np.asarray(theta_tilde, dtype=float).ravel()
    d = np.asarray(delta, dtype=float).ravel()
    n, p = X.shape
    if eps.shape != (n, p) or nu.shape != (n,) or tt.shape != (p,) or d.shape != (p,):
        raise DimensionError("inconsistent shapes in identity check")
    S, psi, eta = problem.sigma_row, problem.psi, problem.eta
    coeff = n * (eta**2 - 1.0)

    def ell(th):
        r = X @ th - y
        u = th - psi
        return r @ r + coeff * (u @ S @ u)

    lhs = float(ell(tt + d) - ell(tt))

    A = X - eps
    b = y - nu
    Xd = X @ d
    Ad = A @ d
    ed = eps @ d
    oracle_resid = A @ tt - b
    noise_tt = eps @ tt - nu
    noise_psi = eps @ psi - nu
    bracket = oracle_resid @ Ad + n * eta**2 * ((tt - psi) @ S @ d)
    rhs = (
        Xd @ Xd
        + coeff * (d @ S @ d)
        + 2.0 * bracket
        + 2.0 * (noise_tt @ Ad)
        + 2.0 * (oracle_resid @ ed)
        + 2.0 * (noise_psi @ ed)
        + 2.0 * ((tt - psi) @ ((eps.T @ eps - n * S) @ d))
    )
    return lhs, float(rhs)
