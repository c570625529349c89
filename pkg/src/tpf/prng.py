"""xoshiro256** seeded through splitmix64.

Constants (Vigna / Blackman):

* splitmix64: increment ``0x9E3779B97F4A7C15``; mix multipliers
  ``0xBF58476D1CE4E5B9`` (shift 30) and ``0x94D049BB133111EB`` (shift 27),
  final shift 31.
* xoshiro256**: output ``rotl(s1 * 5, 7) * 9``; state update with ``t = s1 << 17``
  and final ``rotl(s3, 45)``.
* doubles: ``(x >> 11) * 2**-53`` in [0, 1).

The bulk generators are numba-compiled; :class:`Xoshiro256` keeps the state
in a small uint64 array so scalar and bulk draws interleave deterministically.
"""

from __future__ import annotations

import math

import numba
import numpy as np

MASK64 = (1 << 64) - 1
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_M1 = 0xBF58476D1CE4E5B9
SPLITMIX_M2 = 0x94D049BB133111EB


def splitmix64(state: int):
    """One splitmix64 step: returns (new_state, output) as python ints."""
    state = (state + SPLITMIX_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * SPLITMIX_M1) & MASK64
    z = ((z ^ (z >> 27)) * SPLITMIX_M2) & MASK64
    return state, z ^ (z >> 31)


def seed_state(seed: int) -> np.ndarray:
    s = int(seed) & MASK64
    out = []
    for _ in range(4):
        s, z = splitmix64(s)
        out.append(z)
    return np.array(out, dtype=np.uint64)


def _rotl_py(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def next_u64_py(state: list) -> int:
    """Reference (pure python) xoshiro256** step; mutates ``state`` (list of 4 ints)."""
    s0, s1, s2, s3 = state
    result = (_rotl_py((s1 * 5) & MASK64, 7) * 9) & MASK64
    t = (s1 << 17) & MASK64
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl_py(s3, 45)
    state[:] = [s0, s1, s2, s3]
    return result


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _fill_u64(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    five, nine = np.uint64(5), np.uint64(9)
    for i in range(out.size):
        out[i] = _rotl(s1 * five, 7) * nine
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


@numba.njit(cache=True)
def _fill_double(state, out):
    raw = np.empty(out.size, dtype=np.uint64)
    _fill_u64(state, raw)
    scale = 1.0 / 9007199254740992.0
    for i in range(out.size):
        out[i] = float(raw[i] >> np.uint64(11)) * scale


class Xoshiro256:
    def __init__(self, seed: int):
        self.state = seed_state(seed)

    @classmethod
    def derive(cls, *keys: int) -> "Xoshiro256":
        """Independent stream keyed by a tuple of integers."""
        s = 0
        for k in keys:
            s, z = splitmix64(s ^ (int(k) & MASK64))
            s = z
        return cls(s)

    def u64(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _fill_u64(self.state, out)
        return out

    def random(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n)
        _fill_double(self.state, out)
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        r = self.random(size)
        return lo + (hi - lo) * r

    def normal(self, mu: float = 0.0, sigma: float = 1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = self.random(2 * n)
        z = np.sqrt(-2.0 * np.log1p(-u[:n])) * np.cos(2.0 * math.pi * u[n:])
        z = mu + sigma * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi)."""
        return lo + int(self.random() * (hi - lo))
