"""Dense tensor primitives used by every block, gradient and merge routine.

Tensors are plain ``numpy.ndarray`` objects restricted to ``float32`` and
``float64``. Every function here checks that its tensor arguments share one
dtype and raises :class:`DTypeError` otherwise; nothing is silently cast.

``matmul`` has two paths. The reference path accumulates rank-one updates in
a fixed left-to-right order over the inner dimension, so results are
bit-reproducible and comparable against naive loop oracles. The fast path
defers to BLAS and is only enabled explicitly through :func:`fast_path`.

Each public op bumps the active :class:`OpCounter`, which is how structural
operator counts of a forward pass are measured.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from collections.abc import Iterator, Sequence

import numpy as np
from scipy.special import erf

Tensor = np.ndarray

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_fast = contextvars.ContextVar("fast_matmul", default=False)
_counter = contextvars.ContextVar("op_counter", default=None)


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


class OpCounter:
    """Tally of primitive operator invocations, keyed by op name."""

    def __init__(self) -> None:
        self.counts: dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def bump(self, name: str) -> None:
        self.counts[name] = self.counts.get(name, 0) + 1


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def fast_path(enabled: bool = True) -> Iterator[None]:
    """Route ``matmul`` through BLAS inside the block."""
    token = _fast.set(enabled)
    try:
        yield
    finally:
        _fast.reset(token)


def fast_path_enabled() -> bool:
    return _fast.get()


def _record(name: str) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.bump(name)


def _check(*arrays: Tensor) -> np.dtype:
    dtype = None
    for a in arrays:
        if not isinstance(a, np.ndarray):
            raise DTypeError(f"expected ndarray, got {type(a).__name__}")
        if a.dtype not in DTYPES:
            raise DTypeError(f"unsupported dtype {a.dtype}; use float32 or float64")
        if dtype is None:
            dtype = a.dtype
        elif a.dtype != dtype:
            raise DTypeError(f"dtype mismatch: {dtype} vs {a.dtype}")
    return dtype


def tensor(data, dtype=np.float64) -> Tensor:
    """Build a contiguous tensor of one of the supported dtypes."""
    if np.dtype(dtype) not in DTYPES:
        raise DTypeError(f"unsupported dtype {dtype}")
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    dtype = _check(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    _record("matmul")
    if _fast.get():
        return np.matmul(a, b)
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(lead + (a.shape[-2], b.shape[-1]), dtype=dtype)
    for p in range(a.shape[-1]):
        out += a[..., :, p : p + 1] * b[..., p : p + 1, :]
    return out


def transpose(a: Tensor) -> Tensor:
    _check(a)
    _record("transpose")
    return np.swapaxes(a, -1, -2)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a, b)
    _record("add")
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a, b)
    _record("sub")
    return a - b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a, b)
    _record("mul")
    return a * b


def scale(a: Tensor, s: float) -> Tensor:
    dtype = _check(a)
    _record("scale")
    return a * dtype.type(s)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    _check(*parts)
    _record("concat")
    return np.concatenate(parts, axis=axis)


def split(a: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    _check(a)
    if a.shape[axis] % sections:
        raise ShapeError(f"axis of size {a.shape[axis]} does not split into {sections} parts")
    _record("split")
    return np.split(a, sections, axis=axis)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    _check(a)
    _record("reshape")
    return np.reshape(a, shape)


def sum_last(a: Tensor, keepdims: bool = False) -> Tensor:
    _check(a)
    _record("sum")
    return a.sum(axis=-1, keepdims=keepdims)


def mean_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    _check(a)
    _record("mean")
    return a.mean(axis=axes)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    _check(a)
    if np.isnan(a).any():
        raise ValueError("softmax_rows received NaN input")
    _record("softmax")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    dtype = _check(x, gamma, beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layernorm params {gamma.shape}/{beta.shape} do not match width {x.shape[-1]}")
    _record("layernorm")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + dtype.type(eps)) * gamma + beta


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    dtype = _check(x)
    _record("gelu")
    return (x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))).astype(dtype, copy=False)


def relu(x: Tensor) -> Tensor:
    _check(x)
    _record("relu")
    return np.maximum(x, 0)
