"""Reproducible random streams.

Uniform variates come from numpy's PCG64 bit generator (O'Neill's permuted
congruential generator); normals are produced from those uniforms with the
Box-Muller transform so the whole stream is defined by the seed alone.

Sub-seeds are derived as the first 8 bytes (little-endian) of
``blake2b(f"{seed}:{name}", digest_size=8)``.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .tensor import Tensor


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class SeededRNG:
    def __init__(self, seed: int):
        self.seed = int(seed) % (1 << 64)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, name: str) -> "SeededRNG":
        return SeededRNG(derive_seed(self.seed, name))

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(shape)

    def normal_array(self, shape=()) -> np.ndarray:
        shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
        n = math.prod(shape)
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def normal_sample(self, shape) -> Tensor:
        return Tensor._wrap(self.normal_array(shape))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in the half-open range [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def seeded_rng(seed: int) -> SeededRNG:
    return SeededRNG(seed)
