"""Deterministic, platform-independent random number generation.

Every random decision in the pipeline draws from a SplitMix64 stream.  The
recurrence is fixed here (and in the README) so that results are exactly
reproducible on any machine and portable to other languages:

    state <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z = state
    z = (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9   mod 2^64
    z = (z XOR (z >> 27)) * 0x94D049BB133111EB   mod 2^64
    output = z XOR (z >> 31)

Uniform doubles take the top 53 bits: u = (output >> 11) * 2^-53.

Independent streams are derived from the single top-level seed by XOR-ing
it with an FNV-1a 64-bit hash of a key string and scrambling once, so
parallel workers produce identical results regardless of scheduling.
"""
from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes | str) -> int:
    """FNV-1a 64-bit hash; the stable string hash used for stream keys and fold assignment."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *parts: object) -> int:
    """Sub-seed for a named stream: scramble(seed XOR fnv1a64(key)).

    `parts` are joined with '/' to form the key, e.g.
    derive_seed(s, "round0", "stage1", "init").
    """
    key = "/".join(str(p) for p in parts)
    return _mix((seed ^ fnv1a64(key)) & MASK64)


class SplitMix64:
    """Seedable 64-bit generator; all sampling helpers build on next_u64()."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & MASK64
        return _mix(self._state)

    def next_u64_array(self, n: int) -> np.ndarray:
        """Vectorized n draws, bit-identical to n sequential next_u64() calls."""
        states = (np.uint64(self._state) +
                  np.uint64(_GAMMA) * np.arange(1, n + 1, dtype=np.uint64))
        self._state = (self._state + n * _GAMMA) & MASK64
        z = states
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def random_array(self, n: int) -> np.ndarray:
        return (self.next_u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def uniform_array(self, lo: float, hi: float, n: int) -> np.ndarray:
        return lo + (hi - lo) * self.random_array(n)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias (rejection sampling)."""
        if n <= 0:
            raise ValueError("randbelow requires n >= 1")
        limit = MASK64 - (MASK64 % n + 1) % n
        while True:
            r = self.next_u64()
            if r <= limit:
                return r % n

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return lo + self.randbelow(hi - lo + 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
