"""Seeded random streams.

Every random draw in the package goes through :func:`make_rng`, which wraps
numpy's Philox-4x64 counter-based bit generator. Philox output depends only
on (key, counter), so a given seed yields the same stream on every platform.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64-10"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a generator for ``seed``; extra ints select independent substreams."""
    if seed is None:
        raise TypeError("a seed is required")
    if int(seed) < 0:
        raise ValueError("seed must be non-negative")
    entropy = [int(seed), *(int(s) for s in stream)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
