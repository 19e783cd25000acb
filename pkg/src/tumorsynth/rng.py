"""Deterministic seeding utilities.

All randomness flows through numpy's PCG64 generator; the algorithm
identifier below is recorded in every meta.json so outputs can be
reproduced.  Per-case seeds derive from the master seed and the case
index through the SplitMix64 finalizer, which decorrelates consecutive
indices.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "numpy-pcg64"

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(z: int) -> int:
    """One round of the SplitMix64 output function."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix_seed(master_seed: int, index: int) -> int:
    """Derive the 64-bit stream seed for a given sub-stream index."""
    return splitmix64((master_seed + _GAMMA * (index + 1)) & _MASK64)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.uint64(seed & _MASK64))
