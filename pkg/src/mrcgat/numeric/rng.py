"""Counter-based 64-bit pseudorandom streams.

Draw ``i`` of stream ``(seed, stream_id)`` is ``mix64(key + (i + 1) * GAMMA)``
where ``key = mix64(seed ^ mix64(stream_id + GAMMA))`` and ``mix64`` is the
SplitMix64 finalizer. All arithmetic is wrapping uint64, so sequences are
identical on every platform and every draw can be addressed directly.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix64_int(x: int) -> int:
    x &= _MASK
    x = ((x ^ (x >> 30)) * _M1) & _MASK
    x = ((x ^ (x >> 27)) * _M2) & _MASK
    return x ^ (x >> 31)


def _mix64(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(_M1)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(_M2)
    return x ^ (x >> np.uint64(31))


def derive_stream(purpose: str, *indices: int) -> int:
    """Stable 64-bit stream id for a named purpose and integer coordinates."""
    h = hashlib.blake2b(digest_size=8)
    h.update(purpose.encode())
    for i in indices:
        h.update(int(i).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Deterministic stream of 64-bit draws keyed by ``(seed, stream_id)``."""

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK
        self.stream_id = int(stream_id) & _MASK
        self._key = _mix64_int(self.seed ^ _mix64_int(self.stream_id + _GAMMA))
        self.counter = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    def spawn(self, purpose: str, *indices: int) -> "RngStream":
        return RngStream(self.seed, derive_stream(purpose, self.stream_id, *indices))

    def next_u64(self, n: int) -> np.ndarray:
        ctr = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self._key) + ctr * np.uint64(_GAMMA))

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in the open interval (0, 1)."""
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * math.pi * u2), r * np.sin(2.0 * math.pi * u2)])
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        return self.permutation(n)[:k]
