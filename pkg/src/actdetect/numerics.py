"""Deterministic numeric foundation shared by all other modules.

Payloads (activations, features, latent codes) are stored as 32-bit floats;
reductions accumulate in 64-bit to bound summation error. All randomness is
drawn from seeded PCG64 generators so every downstream artifact is
reproducible from its seed.
"""

from __future__ import annotations

import numpy as np

PAYLOAD_DTYPE = np.float32


class InsufficientDataError(ValueError):
    """Raised when a statistic needs more elements than were provided."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Create a seeded PCG64 generator.

    Identical (seed, stream) pairs produce identical sequences on every
    platform. Generators are single-owner: never share one across
    concurrent tasks.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(seq))


def rng_uniform(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw n uniform values in [0, 1) as float32."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return rng.random(int(n), dtype=np.float64).astype(PAYLOAD_DTYPE)


def mean_std(x, axis: int):
    """Population mean and std along `axis`, accumulated in float64.

    Uses the population convention (denominator n). Requires at least two
    elements along the reduced axis so the std is meaningful.
    """
    arr = np.asarray(x)
    if arr.ndim == 0 or arr.shape[axis] < 2:
        raise InsufficientDataError("insufficient data: need >= 2 elements along axis")
    arr64 = arr.astype(np.float64)
    return arr64.mean(axis=axis), arr64.std(axis=axis)
