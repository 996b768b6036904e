"""Seeded 64-bit PRNG used for every random decision in the library.

A single splitmix-style generator backs parameter initialization, data
shuffling, dropout masks, and synthetic data, so a run is reproducible
from its seed alone, independent of platform or numpy version.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Counter-based splitmix generator.

    The n-th draw is ``mix(seed + n*gamma)``, which makes bulk generation
    vectorizable while staying bit-identical to sequential draws.
    """

    def __init__(self, seed: int):
        self._seed = seed & _MASK64
        self._count = 0

    def next_u64(self) -> int:
        self._count += 1
        return _mix((self._seed + self._count * _GAMMA) & _MASK64)

    def _raw_block(self, n: int) -> np.ndarray:
        ks = (self._seed + (self._count + np.arange(1, n + 1, dtype=np.uint64)) * np.uint64(_GAMMA))
        self._count += n
        with np.errstate(over="ignore"):
            z = ks
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u

    def uniform_array(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if not np.isscalar(shape) else int(shape)
        u = (self._raw_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (lo + (hi - lo) * u).reshape(shape)

    def normal_array(self, shape, sigma: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if not np.isscalar(shape) else int(shape)
        m = n + (n & 1)
        u = self.uniform_array(m).reshape(2, -1)
        # Box-Muller; clamp u1 away from 0 so log stays finite.
        u1 = np.maximum(u[0], 2.0**-53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (sigma * z).reshape(shape)

    def randint(self, n: int) -> int:
        """Integer in [0, n) via multiply-shift (n must be < 2**53)."""
        return int((self.next_u64() >> 11) * n >> 53)

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        self.shuffle(idx)
        return np.asarray(idx, dtype=np.int64)


def derive(seed: int, *keys: int) -> int:
    """Deterministically derive a substream seed from a base seed and keys."""
    z = seed & _MASK64
    for k in keys:
        z = _mix((z ^ _mix((k * _GAMMA) & _MASK64)) + _GAMMA & _MASK64)
    return z


def glorot_uniform(rng: SplitMix64, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform_array(shape, -bound, bound)
