"""Reproducible random streams.

Uniforms come from the Philox-4x64 counter-based generator: each raw
64-bit word ``w`` maps to ``((w >> 11) + 0.5) * 2**-53`` in the open unit
interval. Normal variates are the inverse normal CDF of those uniforms, so
a stream can be replayed in any language that has Philox and ``ndtri``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

ALGORITHM = "philox4x64-10/inverse-cdf"
_SCALE = 2.0**-53


class RngState:
    """Seeded random stream with a draw counter (raw 64-bit words consumed)."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.algorithm = ALGORITHM
        self.draws = 0
        self._bitgen = np.random.Philox(key=self.seed & (2**64 - 1))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, draws={self.draws})"

    def _raw(self, n: int) -> np.ndarray:
        self.draws += n
        return self._bitgen.random_raw(n)

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        words = self._raw(n)
        u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _SCALE
        return u.reshape(shape)

    def uniform32(self, shape=()) -> np.ndarray:
        """float32 uniforms, two per raw word: ``((h >> 8) + 0.5) * 2**-24`` per 32-bit half."""
        n = int(np.prod(shape, dtype=np.int64))
        halves = self._raw((n + 1) // 2).view(np.uint32)[:n]
        u = ((halves >> np.uint32(8)).astype(np.float32) + np.float32(0.5)) * np.float32(2.0**-24)
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        return ndtri(self.uniform(shape))

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in ``[low, high)``."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape)
        out = low + np.floor(u * (high - low)).astype(np.int64)
        return np.minimum(out, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of uniform keys; stable so ties (probability ~0) are deterministic
        return np.argsort(self.uniform((n,)), kind="stable")

    def spawn(self, offset: int) -> "RngState":
        """Independent stream derived from this seed."""
        return RngState((self.seed * 1_000_003 + 7919 * (offset + 1)) % 2**63)
