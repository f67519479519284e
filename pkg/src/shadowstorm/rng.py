"""Portable, seedable pseudo-random number generator.

Every stochastic choice in this package (perturbation init, synthetic data,
weight init) goes through :class:`Xoshiro256StarStar` so that outputs are
bit-identical across platforms and Python/numpy versions.

Algorithm
---------
State setup uses the splitmix64 sequence of Steele/Lea/Flood seeded with a
64-bit integer; generation uses xoshiro256** by Blackman and Vigna:

    result = rotl64(s1 * 5, 7) * 9
    t  = s1 << 17
    s2 ^= s0;  s3 ^= s1;  s1 ^= s2;  s0 ^= s3;  s2 ^= t
    s3 = rotl64(s3, 45)

all in 64-bit wrapping arithmetic. Floats in [0, 1) take the top 53 bits:
``(next_u64() >> 11) * 2.0**-53``.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (output, next_state)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31), state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def derive_seed(seed: int, index: int) -> int:
    """Derive an independent per-item seed from (seed, index).

    Mixes the pair through two splitmix64 steps so neighbouring indices give
    uncorrelated streams. Deterministic and platform-independent.
    """
    mixed = (seed & _MASK64) ^ ((_GOLDEN * ((index & _MASK64) + 1)) & _MASK64)
    out, state = _splitmix64(mixed)
    out, _ = _splitmix64(state ^ out)
    return out


class Xoshiro256StarStar:
    """xoshiro256** generator with splitmix64 seeding."""

    def __init__(self, seed: int):
        s = seed & _MASK64
        state = []
        for _ in range(4):
            out, s = _splitmix64(s)
            state.append(out)
        if not any(state):  # all-zero state is a fixed point; cannot occur
            state[0] = 1    # from splitmix64 in practice, guarded anyway
        self._s = state

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randint(self, low: int, high: int) -> int:
        """Integer in [low, high] inclusive, by rejection-free modulo of a
        53-bit draw (bias < 2**-40 for the ranges used here)."""
        span = high - low + 1
        return low + int(self.random() * span)

    def fill(self, shape) -> np.ndarray:
        """Array of uniform [0, 1) floats in C order."""
        n = int(np.prod(shape))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = (self.next_u64() >> 11) * 2.0 ** -53
        return out.reshape(shape)

    def fill_uniform(self, shape, low: float, high: float) -> np.ndarray:
        return low + (high - low) * self.fill(shape)
