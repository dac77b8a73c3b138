"""
Counter-Based Random Numbers

SplitMix64 in counter mode: output i of a stream keyed by k is
mix(k + (i + 1) * GOLDEN). Streams are derived from (seed, labels...) so the
same key always yields the same numbers on every platform, independent of
numpy's own generators.
"""

import hashlib
from typing import Union

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

StreamLabel = Union[int, str]


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MUL1
        z = (z ^ (z >> np.uint64(27))) * _MUL2
        return z ^ (z >> np.uint64(31))


def _label_to_int(label: StreamLabel) -> int:
    if isinstance(label, str):
        return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")
    return int(label) & _MASK64


def derive_key(seed: int, *labels: StreamLabel) -> int:
    """Fold a seed and any number of stream labels into a 64-bit key."""
    key = _mix(np.array([_label_to_int(seed)], dtype=np.uint64))
    for label in labels:
        with np.errstate(over="ignore"):
            key = _mix(key ^ np.uint64(_label_to_int(label)) + _GOLDEN)
    return int(key[0])


class Rng:
    """A counter-mode SplitMix64 stream.

    The stream is an explicit value: callers pass it around, nothing reads a
    global generator.
    """

    def __init__(self, seed: int, *labels: StreamLabel):
        self.key = derive_key(seed, *labels)
        self.counter = 0

    @classmethod
    def from_key(cls, key: int) -> "Rng":
        rng = cls.__new__(cls)
        rng.key = key & _MASK64
        rng.counter = 0
        return rng

    def spawn(self, *labels: StreamLabel) -> "Rng":
        """Independent child stream; does not advance this stream."""
        return Rng.from_key(derive_key(self.key, *labels))

    def uint64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.key) + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n floats in [0, 1) with 53 random bits each."""
        return (self.uint64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def random(self) -> float:
        return float(self.uniform(1)[0])

    def uniform_range(self, low: float, high: float, n: int = 1) -> np.ndarray:
        return low + (high - low) * self.uniform(n)

    def integers(self, low: int, high: int, n: int = 1) -> np.ndarray:
        """n integers drawn from [low, high)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        return low + np.floor(self.uniform(n) * (high - low)).astype(np.int64)

    def integer(self, low: int, high: int) -> int:
        return int(self.integers(low, high, 1)[0])

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller."""
        u1 = 1.0 - self.uniform(n)
        u2 = self.uniform(n)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, pool: np.ndarray, k: int) -> np.ndarray:
        """k distinct elements of `pool`, uniformly without replacement."""
        pool = np.asarray(pool)
        k = min(k, pool.size)
        return pool[self.permutation(pool.size)[:k]]
