"""Counter-based deterministic random stream.

Every draw is a pure function of (key, counter), so streams are reproducible
bit-for-bit across platforms, can be checkpointed as two integers, and can be
split into independent substreams without sharing mutable state. Gaussians use
Box-Muller on the raw uniforms; no library generator is involved anywhere.
"""

from __future__ import annotations

import numpy as np

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_STREAM_SALT = np.uint64(0x632BE59BD9B4E019)

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 2.0 ** -53


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = z ^ (z >> np.uint64(30))
        z = z * _MIX1
        z = z ^ (z >> np.uint64(27))
        z = z * _MIX2
        z = z ^ (z >> np.uint64(31))
    return z


class Rng:
    """Splittable stream of uniforms/normals addressed by a 64-bit key and counter."""

    __slots__ = ("key", "counter")

    def __init__(self, seed: int, counter: int = 0):
        with np.errstate(over="ignore"):
            self.key = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLD + _STREAM_SALT)
        self.counter = counter

    @classmethod
    def _from_key(cls, key: np.uint64, counter: int = 0) -> "Rng":
        rng = cls.__new__(cls)
        rng.key = key
        rng.counter = counter
        return rng

    def substream(self, tag: int) -> "Rng":
        """Independent stream derived from this one; same (key, tag) -> same stream."""
        with np.errstate(over="ignore"):
            key = _mix(self.key ^ _mix(np.uint64(tag & 0xFFFFFFFFFFFFFFFF) * _GOLD + _MIX1))
        return Rng._from_key(key)

    def state(self) -> tuple[int, int]:
        return int(self.key), self.counter

    @classmethod
    def from_state(cls, key: int, counter: int) -> "Rng":
        return cls._from_key(np.uint64(key), counter)

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(self.key + _GOLD * idx)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def uniform_open(self, n: int) -> np.ndarray:
        """n doubles in (0, 1]; safe as a log argument."""
        return ((self.u64(n) >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _INV_2_53

    def normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller."""
        m = (n + 1) // 2
        u1 = self.uniform_open(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = _TWO_PI * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers uniform on [0, bound); bias is O(2^-53), negligible for any test here."""
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def permutation_prefix(self, total: int, n: int) -> np.ndarray:
        """First n entries of a uniform random permutation of range(total).

        Sparse Fisher-Yates: O(n) time and memory regardless of total.
        """
        us = self.uniform(n)
        swaps: dict[int, int] = {}
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            j = i + int(us[i] * (total - i))
            if j > total - 1:
                j = total - 1
            a_j = swaps.get(j, j)
            out[i] = a_j
            swaps[j] = swaps.get(i, i)
        return out
