"""Seeded random streams with named substreams per pipeline stage.

Every source of randomness in the package draws from ``substream(seed, name)``
so that stages (init, shuffle, pair sampling, ...) are independently
reproducible from one run seed.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for stage `name`, deterministic in (seed, name)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
