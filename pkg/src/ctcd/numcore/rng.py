"""PCG32 generator with Box-Muller normals.

Pure integer arithmetic so streams are identical on every platform.
"""

from __future__ import annotations

import math

import numpy as np

_MULT = 6364136223846793005
_MASK64 = 0xFFFFFFFFFFFFFFFF
_MASK32 = 0xFFFFFFFF
_INV_2_32 = 1.0 / 4294967296.0


class Rng:
    """PCG-XSH-RR 64/32 generator.

    ``seed`` and ``stream`` are 64-bit. Normals come in Box-Muller pairs; each
    pair consumes exactly two uniforms and the second value is cached.
    """

    def __init__(self, seed: int = 0, stream: int = 54):
        self.seed = seed & _MASK64
        self.stream = stream & _MASK64
        self.state = 0
        self.inc = ((self.stream << 1) | 1) & _MASK64
        self.next_u32()
        self.state = (self.state + self.seed) & _MASK64
        self.next_u32()
        self._spare: float | None = None

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * _MULT + self.inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & _MASK32
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & _MASK32

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 32-bit resolution."""
        return self.next_u32() * _INV_2_32

    def randint(self, low: int, high: int) -> int:
        """Unbiased integer in the closed range [low, high]."""
        bound = high - low + 1
        if bound <= 0:
            raise ValueError(f"empty range [{low}, {high}]")
        if bound > _MASK32 + 1:
            raise ValueError("range wider than 32 bits")
        threshold = ((_MASK32 + 1) - bound) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return low + r % bound

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()  # (0, 1], safe for log
        u2 = self.uniform()
        radius = math.sqrt(-2.0 * math.log(u1))
        angle = 2.0 * math.pi * u2
        self._spare = radius * math.sin(angle)
        return radius * math.cos(angle)

    def normal_array(self, shape, scale: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        out = np.fromiter((self.normal() for _ in range(n)), dtype=np.float64, count=n)
        return out.reshape(shape) * scale

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        out = np.fromiter((self.uniform() for _ in range(n)), dtype=np.float64, count=n)
        return (low + (high - low) * out).reshape(shape)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i)
            order[i], order[j] = order[j], order[i]
        return order

    def spawn(self, stream: int) -> "Rng":
        """Independent generator on another stream, seeded from this one."""
        seed = (self.next_u32() << 32) | self.next_u32()
        return Rng(seed, stream)
