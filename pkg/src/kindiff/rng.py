"""Deterministic RNG derivation: one master seed, stable per-purpose streams."""

from __future__ import annotations

import zlib

import numpy as np


def rng_for(seed: int, *tags) -> np.random.Generator:
    """A Generator keyed by (seed, tags); same arguments, same stream."""
    entropy = [int(seed) & 0xFFFFFFFF] + [
        zlib.crc32(str(t).encode("utf-8")) for t in tags
    ]
    return np.random.default_rng(np.random.SeedSequence(entropy))
