"""Portable seeded random stream (SplitMix64 + Box-Muller).

Written out explicitly rather than using ``numpy.random`` so the bit stream
is fixed by this file alone and golden tensors do not depend on the numpy
version.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int | str) -> int:
    """Deterministically combine a seed with labels into a new 64-bit seed."""
    state = seed & _MASK
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little")
        z = ((state ^ (key & _MASK)) + _GOLDEN) & _MASK
        state = int(_mix(np.array([z], dtype=np.uint64))[0])
    return state


class SplitMix64:
    """Caller-owned generator; every draw advances ``state``."""

    def __init__(self, seed: int = 42):
        self.seed = int(seed)
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        s = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
        self.state = (self.state + n * _GOLDEN) & _MASK
        return _mix(s)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 random bits each."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).ravel()
        return z[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers uniform on [0, high)."""
        if high < 1:
            raise ValueError("high must be >= 1")
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, *keys: int | str) -> "SplitMix64":
        return SplitMix64(derive_seed(self.seed, *keys))
