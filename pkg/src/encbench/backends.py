"""Compute backends: the kernel set every encoder and benchmark runs on.

Two interchangeable backends implement the same kernels:

``reference``
    Eager, single-threaded, deliberately naive formulations (einsum
    contractions, per-index loops). It is the correctness oracle: slow,
    obvious, and deterministic down to the bit.

``optimized``
    Vectorized kernels backed by BLAS where it matters (cache-blocked
    multithreaded matmul), dispatched through a bounded worker pool.
    Kernel calls return immediately with shape and dtype resolved; payload
    materialization may be deferred until ``synchronize`` (or until someone
    reads ``Tensor.data``). Timing a workload on this backend without a
    final synchronize undercounts.

Shape and dtype contracts are validated eagerly on both backends, so a bad
call fails at the call site even when the numeric work is deferred.
"""

from __future__ import annotations

import math
import os
import platform
import threading
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special as _special

from .tensor import DType, DTypeError, ShapeError, Tensor


@dataclass(frozen=True)
class BackendId:
    name: str
    descriptor: str


def host_descriptor() -> str:
    cpu = platform.processor() or platform.machine() or "unknown-cpu"
    return f"{cpu}, {os.cpu_count() or 1} logical cpus, numpy {np.__version__}"


# ---------------------------------------------------------------------------
# shared contract checks (shape inference happens here, once, for both backends)
# ---------------------------------------------------------------------------

def _require_dtype(t: Tensor, dtype: DType, op: str, arg: str) -> None:
    if t.dtype is not dtype:
        raise DTypeError(f"{op}: {arg} must be {dtype.value}, got {t.dtype.value}")


def _matmul_shape(a: Tensor, b: Tensor) -> tuple[int, int]:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a.shape[0], b.shape[1]


def _batched_matmul_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"batched_matmul needs equal-rank >=2 operands, got {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batched_matmul leading extents differ: {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"batched_matmul inner extents differ: {a.shape} x {b.shape}")
    return a.shape[:-2] + (a.shape[-2], b.shape[-1])


def _linear_shape(x: Tensor, w: Tensor, bias: Tensor | None) -> tuple[int, ...]:
    if w.ndim != 2:
        raise ShapeError(f"linear weight must be rank 2 [out,in], got {w.shape}")
    out_f, in_f = w.shape
    if x.shape[-1] != in_f:
        raise ShapeError(f"linear input extent {x.shape} does not match weight {w.shape}")
    if bias is not None and bias.shape != (out_f,):
        raise ShapeError(f"linear bias must be [{out_f}], got {bias.shape}")
    return x.shape[:-1] + (out_f,)


def _norm_axis(t: Tensor, axis: int, op: str) -> int:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {t.shape}")
    return axis % t.ndim


def _layer_norm_check(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> None:
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(
            f"layer_norm gamma/beta must be [{h}], got {gamma.shape} / {beta.shape}"
        )


def _lookup_check(table: Tensor, ids: Tensor) -> tuple[int, ...]:
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup table must be rank 2, got {table.shape}")
    _require_dtype(ids, DType.I64, "embedding_lookup", "ids")
    _require_dtype(table, DType.F32, "embedding_lookup", "table")
    vocab = table.shape[0]
    raw = ids.data
    bad = (raw < 0) | (raw >= vocab)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise IndexError(
            f"embedding_lookup: id {int(raw[pos])} at position {pos} outside [0, {vocab})"
        )
    return ids.shape + (table.shape[1],)


def _add_shape(x: Tensor, y: Tensor) -> tuple[int, ...]:
    if x.dtype is not y.dtype:
        raise DTypeError(f"add: dtypes differ ({x.dtype.value} vs {y.dtype.value})")
    try:
        return tuple(np.broadcast_shapes(x.shape, y.shape))
    except ValueError:
        raise ShapeError(f"add: shapes {x.shape} and {y.shape} do not broadcast")


def _transpose_shape(x: Tensor, perm: Sequence[int]) -> tuple[int, ...]:
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError(f"transpose perm {tuple(perm)} is not a permutation for {x.shape}")
    return tuple(x.shape[p] for p in perm)


def _reshape_check(x: Tensor, shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(e) for e in shape)
    if any(e < 1 for e in shape) or not shape:
        raise ShapeError(f"reshape target must have positive extents, got {shape}")
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape {x.shape} -> {shape} changes element count")
    return shape


def _concat_shape(parts: Sequence[Tensor], axis: int) -> tuple[int, ...]:
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    first = parts[0]
    axis = _norm_axis(first, axis, "concat")
    total = 0
    for p in parts:
        if p.ndim != first.ndim or p.dtype is not first.dtype:
            raise ShapeError("concat operands must share rank and dtype")
        for d in range(first.ndim):
            if d != axis and p.shape[d] != first.shape[d]:
                raise ShapeError(
                    f"concat non-axis extents differ: {p.shape} vs {first.shape} on axis {axis}"
                )
        total += p.shape[axis]
    out = list(first.shape)
    out[axis] = total
    return tuple(out)


def _slice_check(x: Tensor, ranges: Sequence[tuple[int, int]]) -> tuple[int, ...]:
    if len(ranges) != x.ndim:
        raise ShapeError(f"slice needs one (start, stop) per axis of {x.shape}")
    out = []
    for d, (start, stop) in enumerate(ranges):
        if not (0 <= start < stop <= x.shape[d]):
            raise ShapeError(f"slice range [{start},{stop}) invalid for axis {d} of {x.shape}")
        out.append(stop - start)
    return tuple(out)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

class Backend:
    """Kernel set shared by both implementations. Instances are stateless
    apart from the optimized backend's worker pool; tensors are immutable
    and safe to share across threads."""

    name: str = "abstract"

    @property
    def id(self) -> BackendId:
        return BackendId(self.name, host_descriptor())

    def synchronize(self) -> None:
        raise NotImplementedError

    # every kernel validates eagerly, then hands numpy work to _launch
    def _launch(self, shape, dtype, fn) -> Tensor:
        raise NotImplementedError

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        _require_dtype(a, DType.F32, "matmul", "a")
        _require_dtype(b, DType.F32, "matmul", "b")
        shape = _matmul_shape(a, b)
        return self._launch(shape, DType.F32, lambda: self._matmul(a.data, b.data))

    def batched_matmul(self, a: Tensor, b: Tensor) -> Tensor:
        _require_dtype(a, DType.F32, "batched_matmul", "a")
        _require_dtype(b, DType.F32, "batched_matmul", "b")
        shape = _batched_matmul_shape(a, b)
        return self._launch(shape, DType.F32, lambda: self._batched_matmul(a.data, b.data))

    def linear(self, x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
        _require_dtype(x, DType.F32, "linear", "x")
        _require_dtype(w, DType.F32, "linear", "w")
        shape = _linear_shape(x, w, bias)
        b = None if bias is None else bias.data
        return self._launch(shape, DType.F32, lambda: self._linear(x.data, w.data, b))

    def softmax(self, x: Tensor, axis: int = -1) -> Tensor:
        _require_dtype(x, DType.F32, "softmax", "x")
        ax = _norm_axis(x, axis, "softmax")
        return self._launch(x.shape, DType.F32, lambda: self._softmax(x.data, ax))

    def layer_norm(self, x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
        _require_dtype(x, DType.F32, "layer_norm", "x")
        _layer_norm_check(x, gamma, beta, eps)
        return self._launch(
            x.shape, DType.F32, lambda: self._layer_norm(x.data, gamma.data, beta.data, eps)
        )

    def gelu(self, x: Tensor) -> Tensor:
        _require_dtype(x, DType.F32, "gelu", "x")
        return self._launch(x.shape, DType.F32, lambda: self._gelu(x.data))

    def embedding_lookup(self, table: Tensor, ids: Tensor) -> Tensor:
        shape = _lookup_check(table, ids)
        return self._launch(shape, DType.F32, lambda: self._lookup(table.data, ids.data))

    def add(self, x: Tensor, y: Tensor) -> Tensor:
        shape = _add_shape(x, y)
        return self._launch(shape, x.dtype, lambda: np.add(x.data, y.data))

    def tanh(self, x: Tensor) -> Tensor:
        _require_dtype(x, DType.F32, "tanh", "x")
        return self._launch(x.shape, DType.F32, lambda: np.tanh(x.data))

    def scale(self, x: Tensor, factor: float) -> Tensor:
        _require_dtype(x, DType.F32, "scale", "x")
        c = np.float32(factor)
        return self._launch(x.shape, DType.F32, lambda: x.data * c)

    def transpose(self, x: Tensor, perm: Sequence[int]) -> Tensor:
        shape = _transpose_shape(x, perm)
        perm = tuple(perm)
        return self._launch(
            shape, x.dtype, lambda: np.ascontiguousarray(np.transpose(x.data, perm))
        )

    def reshape(self, x: Tensor, shape: Sequence[int]) -> Tensor:
        out = _reshape_check(x, shape)
        return self._launch(out, x.dtype, lambda: x.data.reshape(out))

    def concat(self, parts: Sequence[Tensor], axis: int) -> Tensor:
        shape = _concat_shape(parts, axis)
        ax = axis % parts[0].ndim
        parts = tuple(parts)
        return self._launch(
            shape, parts[0].dtype, lambda: np.concatenate([p.data for p in parts], axis=ax)
        )

    def slice(self, x: Tensor, ranges: Sequence[tuple[int, int]]) -> Tensor:
        shape = _slice_check(x, ranges)
        sel = tuple(slice(int(a), int(b)) for a, b in ranges)
        return self._launch(shape, x.dtype, lambda: np.ascontiguousarray(x.data[sel]))

    # numeric bodies differ per backend
    def _matmul(self, a, b):
        raise NotImplementedError

    def _batched_matmul(self, a, b):
        raise NotImplementedError

    def _linear(self, x, w, b):
        raise NotImplementedError

    def _softmax(self, x, axis):
        raise NotImplementedError

    def _layer_norm(self, x, g, b, eps):
        raise NotImplementedError

    def _gelu(self, x):
        raise NotImplementedError

    def _lookup(self, table, ids):
        raise NotImplementedError


class ReferenceBackend(Backend):
    """Eager scalar-faithful kernels; the oracle the optimized backend is
    checked against. einsum contractions here run numpy's naive loop path,
    not BLAS, and everything executes on the calling thread."""

    name = "reference"

    def synchronize(self) -> None:
        # kernels are eager; nothing is ever pending
        return

    def _launch(self, shape, dtype, fn) -> Tensor:
        arr = fn()
        if arr.shape != tuple(shape):
            raise ShapeError(f"kernel produced {arr.shape}, expected {tuple(shape)}")
        return Tensor._wrap(arr)

    def _matmul(self, a, b):
        return np.einsum("ik,kj->ij", a, b)

    def _batched_matmul(self, a, b):
        lead = a.shape[:-2]
        out = np.empty(lead + (a.shape[-2], b.shape[-1]), dtype=np.float32)
        for idx in np.ndindex(*lead):
            out[idx] = np.einsum("ik,kj->ij", a[idx], b[idx])
        return out

    def _linear(self, x, w, b):
        y = np.einsum("...i,oi->...o", x, w)
        if b is not None:
            y = y + b
        return y

    def _softmax(self, x, axis):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)

    def _layer_norm(self, x, g, b, eps):
        mean = x.mean(axis=-1, keepdims=True, dtype=np.float32)
        var = np.mean((x - mean) ** 2, axis=-1, keepdims=True, dtype=np.float32)
        return ((x - mean) / np.sqrt(var + np.float32(eps))) * g + b

    def _gelu(self, x):
        # x * Phi(x), with the Gaussian CDF evaluated directly
        return (x * _special.ndtr(x)).astype(np.float32)

    def _lookup(self, table, ids):
        out = np.empty(ids.shape + (table.shape[1],), dtype=np.float32)
        for idx in np.ndindex(*ids.shape):
            out[idx] = table[ids[idx]]
        return out


def _run_kernel(fn):
    return fn()


class OptimizedBackend(Backend):
    """BLAS-backed kernels behind a bounded dispatch pool.

    Work is queued in program order; a kernel may read an earlier kernel's
    deferred payload, which resolves inside the pool. Because dependencies
    always point at earlier submissions and the queue is FIFO, the pool
    cannot deadlock. ``synchronize`` drains everything submitted so far.
    """

    name = "optimized"

    def __init__(self, workers: int | None = None):
        if workers is None:
            workers = min(4, os.cpu_count() or 1)
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="encbench-opt")
        self._pending: deque[Future] = deque()
        self._lock = threading.Lock()

    def synchronize(self) -> None:
        while True:
            with self._lock:
                if not self._pending:
                    return
                fut = self._pending.popleft()
            fut.result()

    def _launch(self, shape, dtype, fn) -> Tensor:
        fut = self._pool.submit(_run_kernel, fn)
        with self._lock:
            while self._pending and self._pending[0].done():
                self._pending.popleft()
            self._pending.append(fut)
        return Tensor._deferred(shape, dtype, fut)

    def _matmul(self, a, b):
        return a @ b

    def _batched_matmul(self, a, b):
        return np.matmul(a, b)

    def _linear(self, x, w, b):
        flat = x.reshape(-1, x.shape[-1])
        y = flat @ w.T
        if b is not None:
            y += b
        return y.reshape(x.shape[:-1] + (w.shape[0],))

    def _softmax(self, x, axis):
        out = x - x.max(axis=axis, keepdims=True)
        np.exp(out, out=out)
        out /= out.sum(axis=axis, keepdims=True)
        return out

    def _layer_norm(self, x, g, b, eps):
        mean = x.mean(axis=-1, keepdims=True, dtype=np.float32)
        centered = x - mean
        var = np.mean(np.square(centered), axis=-1, keepdims=True, dtype=np.float32)
        inv = 1.0 / np.sqrt(var + np.float32(eps))
        return centered * (inv * g) + b

    def _gelu(self, x):
        return (0.5 * x * (1.0 + _special.erf(x * np.float32(_INV_SQRT2)))).astype(np.float32)

    def _lookup(self, table, ids):
        return table[ids]


def synchronize(backend: Backend) -> None:
    """Block until every kernel issued on ``backend`` has materialized."""
    backend.synchronize()


_BACKENDS: dict[str, Backend] = {}
BACKEND_NAMES = ("reference", "optimized")


def get_backend(name: str) -> Backend:
    if name not in BACKEND_NAMES:
        raise ValueError(f"unknown backend {name!r}, expected one of {BACKEND_NAMES}")
    if name not in _BACKENDS:
        _BACKENDS[name] = ReferenceBackend() if name == "reference" else OptimizedBackend()
    return _BACKENDS[name]
