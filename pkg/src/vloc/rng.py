"""Seeded counter-based randomness (splitmix64).

The RANSAC sampler and the procedural textures need a generator whose
exact output stream is pinned down, so that a given seed reproduces the
same behaviour everywhere.  splitmix64 is tiny, fast and has a closed
form per step, which also makes it usable as a stateless hash for
texture lattices.
"""

from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """Deterministic 64-bit stream with rejection-sampled integers."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix(self._state)

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def next_index(self, n: int) -> int:
        """Uniform integer in [0, n), drawn by rejection from the stream."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (_MASK + 1) - ((_MASK + 1) % n)
        while True:
            z = self.next_u64()
            if z < limit:
                return z % n

    def sample_distinct(self, n: int, k: int) -> list[int]:
        """k distinct indices in [0, n); duplicates are redrawn."""
        if k > n:
            raise ValueError("cannot sample more distinct indices than n")
        out: list[int] = []
        while len(out) < k:
            idx = self.next_index(n)
            if idx not in out:
                out.append(idx)
        return out


def hash_coords(seed: int, *coords: "np.ndarray | int") -> np.ndarray:
    """Stateless splitmix64-based hash of integer lattice coordinates.

    Accepts scalars or equally shaped integer arrays; returns uint64.
    Each coordinate is folded in with an odd multiplier before mixing so
    that permuted inputs hash differently.
    """
    acc = np.uint64(seed & _MASK)
    mults = (0x9E3779B97F4A7C15, 0xC2B2AE3D27D4EB4F, 0x165667B19E3779F9,
             0x27D4EB2F165667C5, 0x85EBCA77C2B2AE63)
    with np.errstate(over="ignore"):
        for i, c in enumerate(coords):
            arr = np.asarray(c, dtype=np.int64).astype(np.uint64)
            acc = acc ^ (arr * np.uint64(mults[i % len(mults)]))
            acc = (acc + np.uint64(_GAMMA))
            z = acc
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            acc = z ^ (z >> np.uint64(31))
    return acc


def hash_unit_floats(seed: int, *coords) -> np.ndarray:
    """Like :func:`hash_coords` but mapped to floats in [0, 1)."""
    h = hash_coords(seed, *coords)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
