"""Dense float32 tensors with reproducible arithmetic.

Everything downstream (quantization, training, evaluation) runs on these
values, so the priorities are: single canonical layout (row-major float32),
immutability after construction, and bit-identical results for identical
inputs. Matrix products accumulate in float32 with a fixed left-to-right
order over the inner dimension rather than delegating to a BLAS kernel,
trading speed for exact reproducibility; at the scale of the networks in
this package that trade is free.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError


class Tensor:
    """Immutable dense array of 32-bit reals, stored flat in row-major order."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float32, order="C", copy=True)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor contains non-finite elements")
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Take ownership of a freshly allocated float32 array without copying.

        Internal fast path; callers must not retain a writable reference.
        """
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor contains non-finite elements")
        arr.flags.writeable = False
        t._data = arr
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls._wrap(np.zeros(tuple(shape), dtype=np.float32))

    @property
    def data(self) -> np.ndarray:
        """Read-only numpy view of the underlying storage."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def rank(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    def tolist(self):
        return self._data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors.

    Accumulates in float32 over the inner dimension in fixed left-to-right
    order, so results are bit-identical across runs and platforms.
    """
    if a.rank != 2 or b.rank != 2:
        raise DimensionError(f"matmul requires rank-2 operands, got {a.shape} x {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(k):
        out += ad[:, i, None] * bd[i, None, :]
    return Tensor._wrap(out)


def transpose(t: Tensor) -> Tensor:
    if t.rank != 2:
        raise DimensionError(f"transpose requires a rank-2 tensor, got {t.shape}")
    return Tensor._wrap(np.ascontiguousarray(t.data.T))


def reduce_extrema(t: Tensor, axis: int | None = None) -> tuple[Tensor, Tensor]:
    """Minimum and maximum of ``t``, globally or reduced over ``axis``."""
    if t.size == 0:
        raise DomainError("extrema of an empty tensor are undefined")
    if axis is None:
        return (
            Tensor._wrap(np.asarray(t.data.min(), dtype=np.float32)),
            Tensor._wrap(np.asarray(t.data.max(), dtype=np.float32)),
        )
    if not 0 <= axis < t.rank:
        raise DimensionError(f"axis {axis} out of range for rank {t.rank}")
    return (
        Tensor._wrap(t.data.min(axis=axis)),
        Tensor._wrap(t.data.max(axis=axis)),
    )


def l2_normalize(t: Tensor) -> Tensor:
    """Scale each row of a rank-2 tensor to unit Euclidean norm."""
    if t.rank != 2:
        raise DimensionError(f"l2_normalize requires a rank-2 tensor, got {t.shape}")
    x = t.data.astype(np.float64)
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise DomainError("cannot normalize a zero-norm row")
    return Tensor._wrap((x / norms).astype(np.float32))


def relu(t: Tensor) -> Tensor:
    """Elementwise max(x, 0)."""
    return Tensor._wrap(np.maximum(t.data, np.float32(0.0)))
