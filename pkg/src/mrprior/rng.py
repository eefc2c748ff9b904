"""Seeded random streams.

Every consumer derives its generator from ``(seed, *stream_ids)`` through a
counter-based Philox bit generator, so results never depend on how work is
split across workers.
"""

from __future__ import annotations

import numpy as np


def stream(seed, *ids: int) -> np.random.Generator:
    if seed is None:
        seed = 0
    ss = np.random.SeedSequence([int(seed), *[int(i) for i in ids]])
    return np.random.Generator(np.random.Philox(ss))


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Complex noise whose real and imaginary parts are each standard normal."""
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
