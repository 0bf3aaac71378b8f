"""Tensor conventions, seeded randomness and the finite-difference VJP oracle.

Tensors are plain ``numpy.ndarray`` values. Precision is either ``"double"``
(float64, the default everywhere) or ``"single"`` (float32).
"""

from __future__ import annotations

import zlib
from typing import Callable, Hashable

import numpy as np

Tensor = np.ndarray

PRECISIONS = {"double": np.float64, "single": np.float32}

RNG_ALGORITHM = "philox4x64-10"


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class OracleFailure(RuntimeError):
    """Raised when a numerical oracle cannot produce a trustworthy answer."""


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


def as_tensor(data, precision: str = "double") -> Tensor:
    return np.asarray(data, dtype=dtype_for(precision))


def _key_words(key: Hashable) -> tuple[int, ...]:
    if isinstance(key, (int, np.integer)):
        return (int(key) & 0xFFFFFFFF, (int(key) >> 32) & 0xFFFFFFFF)
    if isinstance(key, tuple):
        words: tuple[int, ...] = ()
        for part in key:
            words += _key_words(part)
        return words
    return (zlib.crc32(str(key).encode("utf-8")),)


class RandomSource:
    """Seeded, splittable source of random streams.

    Every stream is a Philox counter-based generator keyed by ``(seed, path)``,
    where ``path`` is the sequence of keys passed to :meth:`split`. Two sources
    with the same seed and path produce bit-identical draws regardless of how
    many other streams were created or which thread consumes them.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(path)
        if not all(isinstance(w, (int, np.integer)) and 0 <= w < 2**32 for w in self.path):
            raise TypeError("path must hold 32-bit words; use split() for arbitrary keys")
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def split(self, key: Hashable) -> "RandomSource":
        return RandomSource(self.seed, self.path + _key_words(key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None, precision: str = "double") -> Tensor:
        return self._gen.uniform(low, high, size).astype(dtype_for(precision), copy=False)

    def normal(self, loc=0.0, scale=1.0, size=None, precision: str = "double") -> Tensor:
        return self._gen.normal(loc, scale, size).astype(dtype_for(precision), copy=False)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, path={self.path}, algorithm={self.algorithm!r})"


def inner_product(a: Tensor, b: Tensor) -> float:
    """Sum of elementwise products, reduced in ascending flat-index order."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"inner_product shape mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def _input_cotangent(result):
    # Pullbacks may return (input_cotangent, param_cotangents); the oracle only needs the first.
    if isinstance(result, tuple):
        return result[0]
    return result


def finite_diff_vjp_check(
    f: Callable,
    x: Tensor,
    w: Tensor,
    h: float = 1e-5,
    vjp: Callable | None = None,
    eps_floor: float = 1e-12,
) -> float:
    """Relative error between an analytic VJP and central differences.

    ``f(x)`` returns either an output tensor (then ``vjp(x, w)`` must be
    given) or a pair ``(output, pullback)`` whose pullback maps a cotangent to
    the input cotangent (possibly as the first element of a tuple).
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = np.array(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)

    def evaluate(z):
        out = f(z)
        return out[0] if vjp is None else out

    if vjp is None:
        _, pb = f(x.copy())
        analytic = _input_cotangent(pb(w))
    else:
        analytic = _input_cotangent(vjp(x.copy(), w))
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)

    g_fd = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = np.asarray(evaluate(x.copy()), dtype=np.float64)
        flat[i] = saved - h
        down = np.asarray(evaluate(x.copy()), dtype=np.float64)
        flat[i] = saved
        g_fd[i] = inner_product(w, (up - down) / (2.0 * h))

    if not (np.all(np.isfinite(g_fd)) and np.all(np.isfinite(analytic))):
        raise OracleFailure("non-finite value in finite-difference VJP check")
    return float(np.linalg.norm(g_fd - analytic.ravel()) / max(np.linalg.norm(g_fd), eps_floor))
