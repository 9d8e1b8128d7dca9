"""Small dense linear-algebra helpers shared by the quantization and adapter code.

Matrices and vectors are plain float64 numpy arrays. ``as_matrix`` and
``as_vector`` validate shape and finiteness and hand back read-only views, so
nothing downstream can mutate a weight in place by accident.
"""

from __future__ import annotations

import numba
import numpy as np

DEFAULT_RANK_TOL = 1e-9


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Return ``data`` as an immutable 2-D float64 array.

    Raises:
        ValueError: if ``data`` is not 2-D or holds NaN/Inf.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return _frozen(arr)


def as_vector(data, name: str = "vector") -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return _frozen(arr)


@numba.njit(cache=True)
def _matmul_kernel(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for r in range(k):
            air = a[i, r]
            for j in range(n):
                out[i, j] += air * b[r, j]
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right reduction order.

    ``c[i, j]`` is accumulated as ``((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``
    with every product and sum rounded separately (no fused multiply-add), so
    the result is bitwise reproducible and identical to a naive triple loop.
    1-D operands are accepted on either side and treated as a row (left) or
    column (right).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    if a2.ndim != 2 or b2.ndim != 2 or a2.shape[1] != b2.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if not (np.all(np.isfinite(a2)) and np.all(np.isfinite(b2))):
        raise ValueError("matmul operands must be finite")
    out = _matmul_kernel(np.ascontiguousarray(a2), np.ascontiguousarray(b2))
    if a.ndim == 1:
        out = out[0]
    if b.ndim == 1:
        out = out[..., 0]
    return out


@numba.njit(cache=True)
def _pool_kernel(x, group_size):
    n, d = x.shape
    out = np.zeros((n, d // group_size))
    for i in range(n):
        for k in range(d // group_size):
            acc = 0.0
            for r in range(k * group_size, (k + 1) * group_size):
                acc += x[i, r]
            out[i, k] = acc
    return out


def group_sum_pool(x: np.ndarray, group_size: int) -> np.ndarray:
    """Sum non-overlapping windows of ``group_size`` along the last axis.

    Works on a single vector or on a batch of row vectors. This is the
    average-pool-times-window operation that feeds the pooled adapter.
    """
    x = np.asarray(x, dtype=np.float64)
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    d_in = x.shape[-1]
    if d_in % group_size:
        raise ValueError(f"group_size {group_size} does not divide input length {d_in}")
    out = _pool_kernel(np.ascontiguousarray(x.reshape(-1, d_in)), group_size)
    return out.reshape(*x.shape[:-1], d_in // group_size)


def group_sum_pool_transpose(u: np.ndarray, group_size: int) -> np.ndarray:
    """Adjoint of :func:`group_sum_pool`: broadcast each entry over its window."""
    u = np.asarray(u, dtype=np.float64)
    return np.repeat(u, group_size, axis=-1)


def numeric_rank(m: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> int:
    """Rank by Gaussian elimination with partial pivoting.

    A pivot counts as zero when its magnitude is at most ``tol * max|m|``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    work = np.array(m, dtype=np.float64)
    if work.ndim != 2 or work.size == 0:
        raise ValueError(f"numeric_rank needs a non-empty 2-D matrix, got shape {work.shape}")
    scale = np.max(np.abs(work))
    if scale == 0.0:
        return 0
    threshold = tol * scale
    rows, cols = work.shape
    rank = 0
    for col in range(cols):
        if rank == rows:
            break
        pivot = rank + int(np.argmax(np.abs(work[rank:, col])))
        if abs(work[pivot, col]) <= threshold:
            continue
        if pivot != rank:
            work[[rank, pivot]] = work[[pivot, rank]]
        factors = work[rank + 1 :, col] / work[rank, col]
        work[rank + 1 :, col:] -= factors[:, None] * work[rank, col:]
        rank += 1
    return rank
