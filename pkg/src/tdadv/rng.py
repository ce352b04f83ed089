"""Seeded random streams with a fixed, platform-independent algorithm.

Every stochastic component (synthetic data, weight init, parameter sampling,
smoothing noise) draws from SplitMix64 so that identical seeds reproduce
identical bit streams on any machine.  The stream is counter-based: draw k of
a stream seeded with s is mix64(s + (k+1) * GOLDEN), which lets us generate
blocks with vectorized uint64 arithmetic.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix64_block(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *tokens: int | str) -> int:
    """Deterministically derive an independent substream seed.

    Strings are folded in bytewise so image ids can key their own streams.
    """
    h = mix64(seed)
    for tok in tokens:
        if isinstance(tok, str):
            for b in tok.encode("utf-8"):
                h = mix64(h ^ b)
        else:
            h = mix64(h ^ (tok & _MASK))
    return h


class SplitMix64:
    """A single sequential stream; scalar and block draws share one counter."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self._counter = 0

    def next_u64(self) -> int:
        self._counter += 1
        return mix64(self.seed + self._counter * GOLDEN)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo bias is negligible for n << 2^64."""
        return self.next_u64() % n

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def uniform_block(self, n: int) -> np.ndarray:
        """n float64 values in [0, 1), advancing the stream by n draws."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(GOLDEN)
        bits = _mix64_block(z)
        return (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal_block(self, n: int, sigma: float = 1.0) -> np.ndarray:
        """n gaussian draws via Box-Muller (cosine branch, 2 uniforms each)."""
        u = self.uniform_block(2 * n).reshape(2, n)
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        return sigma * r * np.cos(2.0 * np.pi * u[1])

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
