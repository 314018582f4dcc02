"""Deterministic random source used everywhere randomness is needed.

The generator is xoshiro256** (Blackman & Vigna), a 64-bit xorshift-family
generator, seeded through splitmix64. Both are fully specified here so the
streams can be reproduced bit-for-bit in any language:

splitmix64 (state ``x``, one output per call)::

    x     = (x + 0x9E3779B97F4A7C15) mod 2^64
    z     = x
    z     = ((z XOR (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z     = ((z XOR (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    out   = z XOR (z >> 31)

xoshiro256** (state ``s[0..3]``, never all zero)::

    out   = rotl(s[1] * 5, 7) * 9        (mod 2^64)
    t     = s[1] << 17                   (mod 2^64)
    s[2] ^= s[0];  s[3] ^= s[1];  s[1] ^= s[2];  s[0] ^= s[3]
    s[2] ^= t;     s[3]  = rotl(s[3], 45)

Derived values:

* uniform double in [0, 1): ``(out >> 11) * 2^-53``
* uniform double in (0, 1]: ``((out >> 11) + 1) * 2^-53`` (used by Box-Muller)
* integer in [0, n): ``floor(uniform * n)``
* standard normal: Box-Muller pairs; each pair consumes two raw draws
  ``u1 in (0,1], u2 in [0,1)`` and yields
  ``sqrt(-2 ln u1) * (cos, sin)(2 pi u2)``
* shuffle: Fisher-Yates from the high index down
* sub-seed for stream ``index`` under ``master_seed``: the output of one
  splitmix64 step started at ``master_seed + (index + 1) * 0x9E3779B97F4A7C15``
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO53 = float(1 << 53)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (the post-increment state)."""
    z = (x + _GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Independent sub-seed for stream ``index``; pure function of both args."""
    if index < 0:
        raise ValueError(f"stream index must be >= 0, got {index}")
    return splitmix64((master_seed + index * _GAMMA) & _MASK64)


class RandomSource:
    """xoshiro256** stream with the derived draws documented above."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        seed &= _MASK64
        state = []
        x = seed
        for _ in range(4):
            x = (x + _GAMMA) & _MASK64
            state.append(splitmix64(x))
        if not any(state):  # all-zero state is the one invalid seed
            state[0] = _GAMMA
        self._s = state

    def next_u64(self) -> int:
        s = self._s
        out = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return out

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """Uniform double in [low, high)."""
        u = (self.next_u64() >> 11) / _TWO53
        return low + u * (high - low)

    def uniforms(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = (self.next_u64() >> 11) / _TWO53
        if low != 0.0 or high != 1.0:
            out = low + out * (high - low)
        return out

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        u1 = ((self.next_u64() >> 11) + 1) / _TWO53
        u2 = (self.next_u64() >> 11) / _TWO53
        return mean + std * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """``n`` standard-normal draws scaled by (mean, std); pairs via Box-Muller."""
        pairs = (n + 1) // 2
        out = np.empty(2 * pairs, dtype=np.float64)
        for i in range(pairs):
            u1 = ((self.next_u64() >> 11) + 1) / _TWO53
            u2 = (self.next_u64() >> 11) / _TWO53
            r = math.sqrt(-2.0 * math.log(u1))
            a = 2.0 * math.pi * u2
            out[2 * i] = r * math.cos(a)
            out[2 * i + 1] = r * math.sin(a)
        out = out[:n]
        if mean != 0.0 or std != 1.0:
            out = mean + std * out
        return out

    def randint(self, n: int) -> int:
        """Integer uniform on [0, n)."""
        if n <= 0:
            raise ValueError(f"randint needs n >= 1, got {n}")
        return int(((self.next_u64() >> 11) / _TWO53) * n)

    def choice(self, weights: list[float]) -> int:
        """Index drawn with the given (unnormalized) weights."""
        total = float(sum(weights))
        u = self.uniform(0.0, total)
        acc = 0.0
        for i, w in enumerate(weights):
            acc += w
            if u < acc:
                return i
        return len(weights) - 1

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
