"""Seeded, splittable random streams.

Every stochastic call in the package takes an integer seed and derives its own
counter-based Philox stream from it, optionally keyed by extra integers so
that independent consumers (batches, epochs, workers) never share draws.
"""
from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    spawn_key = tuple(_key(k) for k in keys)
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int | str) -> int:
    """Child integer seed, stable across runs and platforms."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _key(k: int | str) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k)
