"""Seed derivation and generator construction.

Every stochastic routine takes an explicit integer seed and builds its own
``numpy.random.Generator`` on top of the counter-based Philox bit generator.
Seeds for sub-tasks (replications, grid points) are derived with the
splitmix64 finalizer so that streams are independent of execution order.
"""

import numpy as np

MASK64 = (1 << 64) - 1

# splitmix64 constants (Steele, Lea & Flood 2014)
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """splitmix64 output function applied to ``x + golden``."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, *keys: int) -> int:
    """Combine a base seed with integer keys: ``base ^ hash(keys)``."""
    h = 0
    for k in keys:
        h = mix64(h ^ (int(k) & MASK64))
    return (int(base_seed) & MASK64) ^ h


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & MASK64))
