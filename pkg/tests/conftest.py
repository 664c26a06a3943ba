import numpy as np
import pytest

from eivsc.solver import ConstraintSet, ProblemSpec

CONSTRAINTS = [
    ConstraintSet("simplex"),
    ConstraintSet("l1_ball", 1.5),
    ConstraintSet("nonnegative"),
    ConstraintSet("euclidean"),
]


def random_problem(rng, constraint, eta=1.0, mode="empirical", intercept=False, n=None, p=None):
    """A random well-posed instance with a PSD Hessian."""
    n = n or int(rng.integers(3, 30))
    p = p or int(rng.integers(2, 12))
    X = rng.standard_normal((n, p))
    y = X @ rng.dirichlet(np.ones(p)) + 0.5 * rng.standard_normal(n)
    G = rng.standard_normal((p, p))
    S = G @ G.T / p + 0.1 * np.eye(p)
    psi = 0.1 * rng.standard_normal(p)
    return ProblemSpec(X, y, S, psi, eta, mode, intercept, constraint)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
