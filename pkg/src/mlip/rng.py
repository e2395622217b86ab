"""Seeded random streams.

All randomness comes from numpy's Philox-4x64 generator, a counter-based
64-bit scheme, so a (seed, stream) pair reproduces the same numbers on every
platform numpy supports.
"""
from __future__ import annotations

import zlib

import numpy as np


def generator(seed: int, stream: str = "") -> np.random.Generator:
    """Independent Philox stream keyed by ``seed`` and a stream label."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode("utf-8"))]
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal samples resampled until they fall within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
