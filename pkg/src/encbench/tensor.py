"""Dense tensor type shared by all backends.

A ``Tensor`` is a dense, row-major, immutable array with an explicit dtype.
All compute happens in F32; I64 is reserved for index tensors (token ids,
attention masks, position ids). F16 and BF16 exist only as storage dtypes
inside checkpoint payloads and are widened to F32 on load.

Payloads may be materialized lazily: the optimized backend returns tensors
whose buffer is produced by a worker thread. Reading ``.data`` (or calling
``Backend.synchronize``) blocks until the payload exists. Shape and dtype
are always known eagerly.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import Future
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents do not satisfy an operation's contract."""


class DTypeError(TypeError):
    """Raised when an operation receives a tensor of the wrong dtype."""


class DType(enum.Enum):
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"
    I64 = "I64"

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]

    @property
    def numpy_dtype(self) -> np.dtype:
        """Native numpy dtype. BF16 has none; its payloads stay raw bytes."""
        try:
            return _NUMPY_DTYPE[self]
        except KeyError:
            raise DTypeError(f"{self.value} has no in-memory numpy representation")


_ITEMSIZE = {DType.F32: 4, DType.F16: 2, DType.BF16: 2, DType.I64: 8}
_NUMPY_DTYPE = {
    DType.F32: np.dtype(np.float32),
    DType.F16: np.dtype(np.float16),
    DType.I64: np.dtype(np.int64),
}

# dtypes a live Tensor may carry; storage-only dtypes are rejected
COMPUTE_DTYPES = (DType.F32, DType.I64)


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(e) for e in shape)
    if len(shape) == 0:
        raise ShapeError("zero-rank tensors are not supported")
    for e in shape:
        if e < 1:
            raise ShapeError(f"every extent must be >= 1, got shape {shape}")
    return shape


class Tensor:
    """Immutable dense array. Construct via :func:`tensor` or ``from_array``."""

    __slots__ = ("_shape", "_dtype", "_array", "_future")

    def __init__(self, array: np.ndarray, dtype: DType):
        self._shape = _check_shape(array.shape)
        self._dtype = dtype
        array.flags.writeable = False
        self._array = array
        self._future: Future | None = None

    @classmethod
    def from_array(cls, obj, dtype: DType | None = None) -> "Tensor":
        """Build a tensor from array-like data, copying the payload.

        Floating input maps to F32 and integer input to I64 unless ``dtype``
        says otherwise.
        """
        arr = np.asarray(obj)
        if arr.ndim == 0:
            raise ShapeError("zero-rank tensors are not supported")
        if dtype is None:
            if arr.dtype.kind == "f":
                dtype = DType.F32
            elif arr.dtype.kind in "iu":
                dtype = DType.I64
            else:
                raise DTypeError(f"cannot infer tensor dtype from {arr.dtype}")
        if dtype not in COMPUTE_DTYPES:
            raise DTypeError(f"live tensors must be F32 or I64, got {dtype.value}")
        return cls(np.array(arr, dtype=dtype.numpy_dtype, order="C"), dtype)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed contiguous array without copying."""
        dtype = DType.F32 if arr.dtype == np.float32 else DType.I64
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        return cls(arr, dtype)

    @classmethod
    def _deferred(cls, shape: Sequence[int], dtype: DType, future: Future) -> "Tensor":
        t = object.__new__(cls)
        t._shape = _check_shape(shape)
        t._dtype = dtype
        t._array = None
        t._future = future
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self._shape

    @property
    def ndim(self) -> int:
        return len(self._shape)

    @property
    def dtype(self) -> DType:
        return self._dtype

    @property
    def size(self) -> int:
        return math.prod(self._shape)

    @property
    def is_materialized(self) -> bool:
        return self._array is not None

    @property
    def data(self) -> np.ndarray:
        """Read-only payload; blocks until a deferred payload is computed."""
        if self._array is None:
            arr = self._future.result()
            if arr.shape != self._shape:
                raise ShapeError(
                    f"deferred kernel produced shape {arr.shape}, expected {self._shape}"
                )
            arr.flags.writeable = False
            self._array = arr
            self._future = None
        return self._array

    def tolist(self):
        return self.data.tolist()

    def item(self) -> float | int:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self._shape}")
        return self.data.reshape(-1)[0].item()

    def __repr__(self) -> str:
        state = "deferred" if self._array is None else "materialized"
        return f"Tensor(shape={self._shape}, dtype={self._dtype.value}, {state})"


def tensor(obj, dtype: DType | None = None) -> Tensor:
    """Shorthand for ``Tensor.from_array``."""
    return Tensor.from_array(obj, dtype)
