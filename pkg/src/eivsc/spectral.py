"""SVD utilities, the closed-form ridge minimum, typicality and approximate rank."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class SvdDecomposition:
    """Full SVD ``A = U diag(s) V'``.

    ``left_vectors`` is n x n and ``right_vectors`` is p x p; only the first
    ``min(n, p)`` columns pair with ``singular_values``.
    """

    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray

    @property
    def rank(self) -> int:
        s = self.singular_values
        if s.size == 0 or s[0] == 0:
            return 0
        return int(np.sum(s > s[0] * max(self.left_vectors.shape[0], self.right_vectors.shape[0])
                          * np.finfo(float).eps))

    def sigma(self, k: int) -> float:
        """``sigma_k`` with 1-based ``k``; zero beyond ``min(n, p)``."""
        if k < 1:
            raise ValueError("k is 1-based")
        return float(self.singular_values[k - 1]) if k <= self.singular_values.size else 0.0

    def reconstruct(self) -> np.ndarray:
        m = self.singular_values.size
        return (self.left_vectors[:, :m] * self.singular_values) @ self.right_vectors[:, :m].T


def svd(A) -> SvdDecomposition:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not np.all(np.isfinite(A)):
        raise ValueError("svd input has non-finite entries")
    U, s, Vt = np.linalg.svd(A, full_matrices=True)
    return SvdDecomposition(s, U, Vt.T)


def ridge_min_value(A, b, alpha, beta) -> float:
    """``min_x alpha^2 ||A x - b||^2 + beta^2 ||x||^2`` via the SVD.

    Each left singular direction contributes
    ``alpha^2 (u_k' b)^2 / (1 + sigma_k^2 alpha^2 / beta^2)``; directions
    outside the column space are undamped.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    if b.shape[0] != A.shape[0]:
        raise DimensionError("b must have one entry per row of A")
    dec = svd(A)
    proj = dec.left_vectors.T @ b
    sig = np.zeros(A.shape[0])
    m = min(A.shape)
    sig[:m] = dec.singular_values
    return float(alpha**2 * np.sum(proj**2 / (1.0 + sig**2 * alpha**2 / beta**2)))


@dataclass(frozen=True)
class TypicalityReport:
    D: float
    D_tilde: float
    per_component: Tuple[Tuple[int, float, float], ...]

    def to_dict(self):
        return {
            "D": self.D,
            "D_tilde": self.D_tilde,
            "per_component": [
                {"k": k, "projection": proj, "damping": damp} for k, proj, damp in self.per_component
            ],
        }


def typicality_D(a_e, dec: SvdDecomposition, sigma, eta, n, l2_noise=0.0) -> TypicalityReport:
    """Damped norm of ``a_e`` in the right singular basis.

    ``D^2 = sum_k (a_e' v_k)^2 / (1 + sigma_k^2 / (sigma^2 eta^2 n))`` over a
    complete orthonormal basis, so mass outside the row space is undamped.
    ``D_tilde = D + l2_noise``.
    """
    if sigma <= 0 or eta <= 0:
        raise ValueError("typicality needs sigma > 0 and eta > 0")
    a_e = np.asarray(a_e, dtype=float).ravel()
    V = dec.right_vectors
    if a_e.shape[0] != V.shape[0]:
        raise DimensionError("a_e length must match the right singular vectors")
    s = dec.singular_values
    pos = np.flatnonzero(s > 0)
    proj = V[:, pos].T @ a_e
    damping = 1.0 / (1.0 + s[pos] ** 2 / (sigma**2 * eta**2 * n))
    d2 = a_e @ a_e - np.sum(proj**2 * (1.0 - damping))
    D = float(np.sqrt(max(0.0, d2)))
    comps = tuple((int(k + 1), float(pr), float(dm)) for k, pr, dm in zip(pos, proj, damping))
    return TypicalityReport(D, D + float(l2_noise), comps)


def approximate_rank(dec: SvdDecomposition, s, v, sigma, p_eff, width, c=1.0) -> int:
    """Smallest ``R >= 0`` with ``R >= c sigma_{R+1} width / (s + v sigma / sqrt(p_eff))``."""
    if width < 0 or p_eff <= 0:
        raise ValueError("need width >= 0 and p_eff > 0")
    denom = s + v * sigma / np.sqrt(p_eff)
    m = dec.singular_values.size
    for R in range(m + 1):
        rhs = c * dec.sigma(R + 1) * width
        if denom > 0:
            if R >= rhs / denom:
                return R
        elif rhs == 0:
            return R
    return m
