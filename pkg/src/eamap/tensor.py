"""Dense tensor primitives used by the model.

Tensors are plain ``numpy.ndarray`` objects (float32 for model math). The
functions here add the shape checks, finiteness guarantees and deterministic
behaviour the rest of the package relies on.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError

DTYPE = np.float32

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class MacCounter:
    """Accumulates multiply counts of every :func:`matmul` while active."""

    def __init__(self) -> None:
        self.multiplies = 0

    def add(self, n: int) -> None:
        self.multiplies += n


_active_counters: list[MacCounter] = []


@contextlib.contextmanager
def count_multiplies() -> Iterator[MacCounter]:
    """Count scalar multiplies performed by ``matmul`` inside the block."""
    counter = MacCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim > 4:
        raise DimensionError(f"tensors have rank <= 4, got shape {arr.shape}")
    return arr


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes (leading axes broadcast).

    >>> matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
    array([[11.]])
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    with np.errstate(invalid="ignore", over="ignore"):
        out = np.matmul(a, b)
    if _active_counters:
        n = int(np.prod(out.shape)) * a.shape[-1]
        for c in _active_counters:
            c.add(n)
    return check_finite(out, f"matmul {a.shape} x {b.shape}")


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax along the last axis with max subtraction."""
    check_finite(x, "softmax input")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalise the last axis to zero mean / unit variance, then scale and shift.

    Returns ``(y, xhat, rstd)``; the last two are needed by the backward pass.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {d}"
        )
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    c = x.dtype.type(_SQRT_2_OVER_PI)
    inner = c * (x + x.dtype.type(0.044715) * x * x * x)
    return x.dtype.type(0.5) * x * (1 + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    c = x.dtype.type(_SQRT_2_OVER_PI)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    half = x.dtype.type(0.5)
    return half * (1 + t) + half * x * (1 - t * t) * c * (1 + 3 * k * x * x)


class RngState:
    """Seeded random stream (PCG64); identical streams for identical seeds."""

    def __init__(self, seed: int) -> None:
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key: int) -> "RngState":
        return RngState((self.seed * 1_000_003 + key) % 2**64)


def randn(rng: RngState, shape: Sequence[int], dtype=DTYPE) -> np.ndarray:
    """i.i.d. standard normal samples."""
    return rng.generator.standard_normal(tuple(shape), dtype=np.float64).astype(dtype)
