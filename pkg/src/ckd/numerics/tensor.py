"""Tensor conventions shared by the numerics engine.

Tensors are plain ``numpy.ndarray`` values of dtype float64 in C order. The
helpers here only enforce the dtype and the finiteness invariant; everything
else is ordinary numpy.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{name}: {bad} non-finite entries")
    return arr


def expect_ndim(x: np.ndarray, ndim: int, name: str) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim} dims, got shape {tuple(x.shape)}")
