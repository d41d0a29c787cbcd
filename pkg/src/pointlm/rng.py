"""Counter-based random numbers: ``output[i] = mix(key, counter + i)``.

The key comes from the seed and a chain of string labels, so independent
subsystems draw from independent streams and results never depend on the
order in which streams are consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

ALGORITHM = "splitmix64-counter"


def _finalize(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_scalar(a: int, b: int) -> int:
    with np.errstate(over="ignore"):
        z = np.array([(a ^ b) & _MASK64], dtype=np.uint64) + _GOLDEN
    return int(_finalize(z)[0])


def _label_hash(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


class Rng:
    """Deterministic generator identified by ``(key, counter)``."""

    def __init__(self, seed: int = 0, *, _key: int | None = None):
        self.seed = int(seed) & _MASK64
        self.key = _mix_scalar(self.seed, 0) if _key is None else _key
        self.counter = 0

    @property
    def algorithm(self) -> str:
        return ALGORITHM

    def split(self, label: str | int) -> "Rng":
        """Child stream; does not advance this generator."""
        child = Rng(self.seed, _key=_mix_scalar(self.key, _label_hash(str(label))))
        return child

    def bits(self, n: int) -> np.ndarray:
        ctr = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + ctr * _GOLDEN
        return _finalize(z)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u = low + (high - low) * u
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        r = np.sqrt(-2.0 * np.log(u1))
        th = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(th), r * np.sin(th)])[:n]
        z = mean + std * z
        return z.reshape(shape) if shape else z[0]

    def integers(self, high: int, shape=()) -> np.ndarray:
        if high < 1:
            raise ValueError("integers: high must be >= 1")
        u = self.uniform(shape)
        return np.minimum(np.floor(np.asarray(u) * high), high - 1).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly."""
        if k > n:
            raise ValueError(f"choice: k={k} > n={n}")
        return self.permutation(n)[:k]
