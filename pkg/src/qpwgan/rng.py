"""Seeded random streams.

All randomness goes through :class:`numpy.random.Generator` backed by PCG64,
seeded from a :class:`numpy.random.SeedSequence`. PCG64 output is specified
bit-for-bit, so a given seed reproduces the same draws on every platform.
Independent streams are obtained with :func:`split`, never by reseeding.
"""

from __future__ import annotations

import numpy as np

SeededRng = np.random.Generator


def make_rng(seed: int | np.random.SeedSequence) -> SeededRng:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def split(seed: int, n: int) -> list[SeededRng]:
    """Return ``n`` statistically independent generators derived from ``seed``."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]
