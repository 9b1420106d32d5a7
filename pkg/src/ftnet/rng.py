"""Seeded xoshiro256++ generator.

The 64-bit seed is expanded into the 256-bit state with splitmix64. Uniform
doubles use the top 53 bits of each output; Gaussians use the polar
Box-Muller method and cache the second variate of every pair. Bulk draws run
in numba-compiled loops so dropout masks for a full training run stay cheap.
"""

from __future__ import annotations

import numba
import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

_U64 = numba.uint64
_GAMMA = np.uint64(GOLDEN_GAMMA)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_NEG53 = 1.0 / 9007199254740992.0


def splitmix64(x: int) -> tuple[int, int]:
    """Advance a splitmix64 state; return ``(new_state, output)``."""
    x = (x + GOLDEN_GAMMA) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def seed_state(seed: int) -> np.ndarray:
    x = seed & MASK64
    out = []
    for _ in range(4):
        x, z = splitmix64(x)
        out.append(z)
    return np.array(out, dtype=np.uint64)


@numba.njit(cache=True, inline="always")
def _rotl(x, k):
    return (x << _U64(k)) | (x >> _U64(64 - k))


@numba.njit(cache=True)
def _next(s):
    s0 = s[0]
    s1 = s[1]
    s2 = s[2]
    s3 = s[3]
    result = _rotl(s0 + s3, 23) + s0
    t = s1 << _U64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    s[0] = s0
    s[1] = s1
    s[2] = s2
    s[3] = s3
    return result


@numba.njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        out[i] = _next(s)


@numba.njit(cache=True)
def _fill_uniform(s, out):
    for i in range(out.shape[0]):
        out[i] = np.float64(_next(s) >> _U64(11)) * _TWO_NEG53


@numba.njit(cache=True)
def _bounded(s, n):
    # reject the low 2**64 mod n outputs so x % n is unbiased
    un = _U64(n)
    threshold = (_U64(0) - un) % un
    while True:
        x = _next(s)
        if x >= threshold:
            return np.int64(x % un)


@numba.njit(cache=True)
def _fill_bounded(s, n, out):
    for i in range(out.shape[0]):
        out[i] = _bounded(s, n)


@numba.njit(cache=True)
def _fill_normal(s, spare, out):
    # spare = [has_spare, value]
    i = 0
    n = out.shape[0]
    while i < n:
        if spare[0] != 0.0:
            out[i] = spare[1]
            spare[0] = 0.0
            i += 1
            continue
        while True:
            u = 2.0 * (np.float64(_next(s) >> _U64(11)) * _TWO_NEG53) - 1.0
            v = 2.0 * (np.float64(_next(s) >> _U64(11)) * _TWO_NEG53) - 1.0
            q = u * u + v * v
            if 0.0 < q < 1.0:
                break
        m = np.sqrt(-2.0 * np.log(q) / q)
        out[i] = u * m
        spare[0] = 1.0
        spare[1] = v * m
        i += 1


@numba.njit(cache=True)
def _permute_inplace(s, arr):
    for i in range(arr.shape[0] - 1, 0, -1):
        j = _bounded(s, i + 1)
        tmp = arr[i]
        arr[i] = arr[j]
        arr[j] = tmp


@numba.njit(cache=True)
def _permutation_rows(s, n, rows, out):
    for r in range(rows):
        for i in range(n):
            out[r, i] = i
        for i in range(n - 1, 0, -1):
            j = _bounded(s, i + 1)
            tmp = out[r, i]
            out[r, i] = out[r, j]
            out[r, j] = tmp


class Rng:
    """xoshiro256++ stream with numpy-shaped bulk draws.

    >>> Rng(7).random(2).shape
    (2,)
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK64
        self._s = seed_state(self.seed)
        self._spare = np.zeros(2, dtype=np.float64)

    def derive(self, *keys: int) -> "Rng":
        """Independent child stream keyed by integers; the parent is untouched."""
        x = self.seed
        for k in keys:
            x, z = splitmix64(x ^ ((int(k) * GOLDEN_GAMMA) & MASK64))
            x = z
        return Rng(x)

    def state(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self._s)

    def next_u64(self) -> int:
        return int(_next(self._s))

    def u64(self, size: int) -> np.ndarray:
        out = np.empty(size, dtype=np.uint64)
        _fill_u64(self._s, out)
        return out

    def random(self, size=None):
        """Uniform doubles in [0, 1)."""
        if size is None:
            return float(self.random(1)[0])
        shape = (size,) if np.isscalar(size) else tuple(size)
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        _fill_uniform(self._s, out)
        return out.reshape(shape)

    def uniform(self, low: float, high: float, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        if size is None:
            return float(self.normal(1, loc, scale)[0])
        shape = (size,) if np.isscalar(size) else tuple(size)
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        _fill_normal(self._s, self._spare, out)
        return (loc + scale * out).reshape(shape)

    def integers(self, n: int, size=None):
        """Uniform integers in [0, n)."""
        if n < 1:
            raise ValueError("n must be positive")
        if size is None:
            return int(_bounded(self._s, n))
        out = np.empty(size, dtype=np.int64)
        _fill_bounded(self._s, n, out)
        return out

    def shuffle(self, arr: np.ndarray) -> None:
        """Fisher-Yates shuffle of a 1-d array in place."""
        _permute_inplace(self._s, arr)

    def permutation(self, n: int) -> np.ndarray:
        arr = np.arange(n, dtype=np.int64)
        self.shuffle(arr)
        return arr

    def permutations(self, n: int, rows: int) -> np.ndarray:
        out = np.empty((rows, n), dtype=np.int64)
        _permutation_rows(self._s, n, rows, out)
        return out

    def sample(self, n: int, k: int) -> np.ndarray:
        """k distinct integers from [0, n), in draw order."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} distinct values from {n}")
        arr = np.arange(n, dtype=np.int64)
        for i in range(k):
            j = i + self.integers(n - i)
            arr[i], arr[j] = arr[j], arr[i]
        return arr[:k].copy()


def as_rng(random_state) -> Rng:
    if isinstance(random_state, Rng):
        return random_state
    if random_state is None:
        return Rng(0)
    return Rng(int(random_state))
