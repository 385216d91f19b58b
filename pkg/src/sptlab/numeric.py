"""Dense float64 primitives, the pinned random stream, and small verification helpers.

Random numbers come from xoshiro256** (four 64-bit words of state). A stream is
keyed by a tuple of integers and/or strings: the master seed and each key are
folded through SplitMix64,

    h = splitmix64(master_seed)
    h = splitmix64(h ^ key_k)         for every key in order (strings -> crc32)

and the four state words are the next four SplitMix64 outputs starting from h.
Uniform doubles use the top 53 bits: ``(x >> 11) * 2**-53``. Normals come in
pairs from Box-Muller on two consecutive uniforms ``(ua, ub)`` with
``u1 = 1 - ua`` (so that ``u1`` lies in (0, 1]) and ``u2 = ub``.
"""

from __future__ import annotations

import math
import zlib
from typing import Callable

import numpy as np
from numba import njit

_MASK64 = (1 << 64) - 1

ALGORITHM_ID = "xoshiro256**/splitmix64-keyed/v1"


def splitmix64(x: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns (new_counter, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (bool, np.bool_)):
        raise TypeError("boolean stream keys are ambiguous")
    k = int(key)
    if k < 0:
        raise ValueError(f"stream keys must be nonnegative, got {k}")
    return k & _MASK64


def derive_state(master_seed: int, *keys) -> np.ndarray:
    """Mix (master_seed, keys...) into a 256-bit xoshiro state."""
    _, h = splitmix64(_key_to_int(master_seed))
    for key in keys:
        _, h = splitmix64(h ^ _key_to_int(key))
    words = []
    counter = h
    for _ in range(4):
        counter, out = splitmix64(counter)
        words.append(out)
    if not any(words):
        words[0] = 1
    return np.array(words, dtype=np.uint64)


@njit(cache=True)
def _xoshiro_fill(state, out):
    s0 = state[0]
    s1 = state[1]
    s2 = state[2]
    s3 = state[3]
    for i in range(out.size):
        x = s1 * np.uint64(5)
        out[i] = ((x << np.uint64(7)) | (x >> np.uint64(57))) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


@njit(cache=True)
def _uniform_fill(state, out):
    raw = np.empty(out.size, dtype=np.uint64)
    _xoshiro_fill(state, raw)
    for i in range(out.size):
        out[i] = np.float64(raw[i] >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _partial_shuffle(n, u):
    idx = np.arange(n)
    for i in range(u.shape[0]):
        j = i + min(int(u[i] * (n - i)), n - i - 1)
        t = idx[i]
        idx[i] = idx[j]
        idx[j] = t
    return idx[: u.shape[0]].copy()


class SeededRng:
    """Keyed xoshiro256** stream. Same (seed, keys) gives the same stream everywhere."""

    algorithm = ALGORITHM_ID

    def __init__(self, seed: int, *keys):
        self.seed = int(seed)
        self.keys = tuple(keys)
        self.state = derive_state(seed, *keys)

    def child(self, *keys) -> "SeededRng":
        """An independent stream keyed by this stream's keys plus ``keys``."""
        return SeededRng(self.seed, *self.keys, *keys)

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        _xoshiro_fill(self.state, out)
        return out

    def uniform(self, n: int | None = None, low: float = 0.0, high: float = 1.0):
        """Uniform doubles in [low, high). ``n=None`` returns a Python float."""
        m = 1 if n is None else int(n)
        out = np.empty(m, dtype=np.float64)
        _uniform_fill(self.state, out)
        if low != 0.0 or high != 1.0:
            out = low + (high - low) * out
        return float(out[0]) if n is None else out

    def normal(self, n: int | None = None, mean: float = 0.0, std: float = 1.0):
        """Standard normals via Box-Muller; an odd count discards the last pair member."""
        m = 1 if n is None else int(n)
        pairs = (m + 1) // 2
        u = self.uniform(2 * pairs)
        z0, z1 = box_muller(1.0 - u[0::2], u[1::2])
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = z0
        z[1::2] = z1
        z = z[:m]
        if mean != 0.0 or std != 1.0:
            z = mean + std * z
        return float(z[0]) if n is None else z

    def integers(self, n_values: int, size: int | None = None):
        """Integers in [0, n_values) as floor(u * n_values)."""
        if n_values <= 0:
            raise ValueError("n_values must be positive")
        m = 1 if size is None else int(size)
        out = np.floor(self.uniform(m) * n_values).astype(np.int64)
        np.minimum(out, n_values - 1, out=out)
        return int(out[0]) if size is None else out

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in draw order (partial Fisher-Yates)."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot choose {k} of {n}")
        return _partial_shuffle(n, self.uniform(k))

    def permutation(self, n: int) -> np.ndarray:
        return self.choice(n, n)


def box_muller(u1, u2):
    """Map uniforms to a pair of standard normals.

    ``u1`` must lie in (0, 1]. Given the raw stream uniforms ``(ua, ub)`` the
    generator calls this with ``u1 = 1 - ua``, ``u2 = ub``.
    """
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    return r * np.cos(theta), r * np.sin(theta)


def gaussian_pair(rng: SeededRng) -> tuple[float, float]:
    ua, ub = rng.uniform(2)
    z0, z1 = box_muller(1.0 - ua, ub)
    return float(z0), float(z1)


def softmax_rows(s) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction. Rejects non-finite input."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax_rows: input contains non-finite entries")
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(s: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis; entries with ``valid == False`` get zero mass.

    Every row needs at least one valid entry.
    """
    if valid is not None and not np.all(valid):
        s = np.where(valid, s, -np.inf)
    e = s - s.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def finite_diff_derivative(f: Callable[[float], float], x: float, h: float) -> float:
    """Central difference (f(x+h) - f(x-h)) / 2h."""
    if not h > 0:
        raise ValueError("step h must be positive")
    fp = f(x + h)
    fm = f(x - h)
    if not (math.isfinite(fp) and math.isfinite(fm)):
        raise ValueError(f"non-finite evaluation at x={x} +/- {h}")
    return (fp - fm) / (2.0 * h)


def frobenius_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))
