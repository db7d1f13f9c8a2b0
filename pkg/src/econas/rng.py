"""xoshiro256** streams seeded through splitmix64.

Weight initialisation needs a named, portable generator so that a given
(seed, layer) pair always produces the same bits. ``Xoshiro256StarStar`` is
the readable reference; :func:`uniform_fill` is the fast path used by the
network builder and must agree with it bit for bit.
"""

from __future__ import annotations

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    x = (x + _SPLITMIX_GAMMA) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def seed_state(seed: int) -> tuple[int, int, int, int]:
    x = seed & MASK64
    out = []
    for _ in range(4):
        x, z = splitmix64(x)
        out.append(z)
    return tuple(out)


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed (order-sensitive)."""
    x = 0
    for p in parts:
        x, z = splitmix64(x ^ (p & MASK64))
        x = z
    return x


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256StarStar:
    def __init__(self, state: tuple[int, int, int, int]):
        if not any(state):
            raise ValueError("xoshiro256** state must not be all zero")
        self.s = [v & MASK64 for v in state]

    @classmethod
    def from_seed(cls, seed: int) -> "Xoshiro256StarStar":
        return cls(seed_state(seed))

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def next_double(self) -> float:
        """Uniform on [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53


@njit(cache=True)
def _fill_doubles(s0, s1, s2, s3, out):
    # uint64 arithmetic wraps modulo 2**64
    for i in range(out.size):
        x = s1 * np.uint64(5)
        r = ((x << np.uint64(7)) | (x >> np.uint64(57))) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        out[i] = np.float64(r >> np.uint64(11)) * 1.1102230246251565e-16


def uniform_fill(seed: int, n: int) -> np.ndarray:
    """``n`` doubles in [0, 1) from the xoshiro256** stream seeded by ``seed``."""
    state = [np.uint64(v) for v in seed_state(seed)]
    out = np.empty(n, dtype=np.float64)
    _fill_doubles(state[0], state[1], state[2], state[3], out)
    return out
