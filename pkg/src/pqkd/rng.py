"""Named, counter-addressable random streams.

Every stochastic component (sampling, dropout, SPSA, data order, ...) draws
from its own stream so that changing how often one of them is used never
shifts the numbers seen by another.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, name, *counters)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    spawn_key = (_key(name),) + tuple(int(c) for c in counters)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn_key)))


def derive_seed(seed: int, name: str, *counters: int) -> int:
    """A 32-bit integer seed derived from a named stream (for seeding sub-objects)."""
    return int(stream(seed, name, *counters).integers(0, 2**31 - 1))
