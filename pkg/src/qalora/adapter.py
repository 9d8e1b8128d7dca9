"""Pooled low-rank adapters on top of a quantized base, and the zero-point merge.

Inputs are column vectors in the math (``y = W^T x``); in code a 2-D input is a
batch of row vectors, so ``Y = X W`` and every function below accepts either.

The pooled adapter sees ``u = group_sum_pool(x, g)`` instead of ``x``, so its
first factor ``A`` has one row per quantization group. Its contribution to a
column is therefore constant inside every group, which is exactly an offset of
that group's zero point::

    y = sum_l scale[l] * (codes[l]^T x[l] - zeros[l] * u[l]) + s * B^T A^T u
      = sum_l scale[l] * (codes[l]^T x[l] - (zeros[l] - s * (A B)[l] / scale[l]) * u[l])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .numkit import as_matrix, group_sum_pool, group_sum_pool_transpose, matmul
from .quant import QuantizedMatrix, dequantize, packed_column_bytes, unpack_range


def default_scale(rank: int) -> float:
    return 2.0 / rank


@dataclass(frozen=True, eq=False)
class AdapterPair:
    """Low-rank factors and their scale.

    ``A`` is ``rows x rank`` (``rows`` = number of groups for a pooled adapter,
    ``d_in`` for a plain LoRA adapter) and ``B`` is ``rank x d_out``.
    """

    A: np.ndarray
    B: np.ndarray
    s: float

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        B = as_matrix(self.B, "B")
        if A.shape[1] != B.shape[0] or A.shape[1] < 1:
            raise ValueError(f"adapter factor shapes do not chain: A {A.shape}, B {B.shape}")
        if not np.isfinite(self.s):
            raise ValueError("adapter scale must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "s", float(self.s))

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def product(self) -> np.ndarray:
        return matmul(self.A, self.B)


@dataclass(frozen=True, eq=False)
class QuantLinearLayer:
    base: QuantizedMatrix
    adapter: Optional[AdapterPair] = None

    def __post_init__(self):
        if self.adapter is not None:
            if self.adapter.A.shape[0] != self.base.num_groups:
                raise ValueError(
                    f"pooled adapter needs {self.base.num_groups} rows in A, got {self.adapter.A.shape[0]}"
                )
            if self.adapter.B.shape[1] != self.base.d_out:
                raise ValueError(f"adapter B must have {self.base.d_out} columns, got {self.adapter.B.shape[1]}")

    @property
    def d_in(self) -> int:
        return self.base.d_in

    @property
    def d_out(self) -> int:
        return self.base.d_out


@dataclass(frozen=True, eq=False)
class DenseLayer:
    """Full-precision layer with an optional plain LoRA adapter (baseline path)."""

    weight: np.ndarray
    adapter: Optional[AdapterPair] = None

    def __post_init__(self):
        w = as_matrix(self.weight, "weight")
        object.__setattr__(self, "weight", w)
        if self.adapter is not None and (
            self.adapter.A.shape[0] != w.shape[0] or self.adapter.B.shape[1] != w.shape[1]
        ):
            raise ValueError(
                f"LoRA factors {self.adapter.A.shape}/{self.adapter.B.shape} do not fit weight {w.shape}"
            )

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


def _check_input(x: np.ndarray, d_in: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != d_in or x.ndim not in (1, 2):
        raise ValueError(f"input of shape {x.shape} does not match d_in={d_in}")
    return x


def _check_grad(g_out: np.ndarray, x: np.ndarray, d_out: int) -> np.ndarray:
    g_out = np.asarray(g_out, dtype=np.float64)
    if g_out.shape[-1] != d_out or g_out.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"output gradient of shape {g_out.shape} does not match input {x.shape} / d_out={d_out}")
    return g_out


@numba.njit(cache=True)
def _quant_matvec_kernel(x, pooled, packed, col_bytes, bits, scales, zeros, group_size):
    n = x.shape[0]
    groups, d_out = scales.shape
    out = np.zeros((n, d_out))
    codes = np.empty(group_size)
    for j in range(d_out):
        start = j * col_bytes
        for l in range(groups):
            base = l * group_size
            unpack_range(packed, start, base, group_size, bits, codes)
            a = scales[l, j]
            z = zeros[l, j]
            for i in range(n):
                acc = 0.0
                for r in range(group_size):
                    acc += x[i, base + r] * codes[r]
                out[i, j] += a * (acc - z * pooled[i, l])
    return out


def quant_matvec(q: QuantizedMatrix, x) -> np.ndarray:
    """``dequantize(q)^T x`` straight from the packed codes, group by group.

    Per (group, column): ``scale * (codes . x_group - zero * sum(x_group))``;
    the de-quantized weight matrix is never materialized.
    """
    x = _check_input(x, q.d_in)
    x2 = np.ascontiguousarray(x.reshape(-1, q.d_in))
    pooled = group_sum_pool(x2, q.group_size)
    out = _quant_matvec_kernel(
        x2, pooled, q.packed_array, packed_column_bytes(q.d_in, q.bits), q.bits, q.scales, q.zeros, q.group_size
    )
    return out.reshape(*x.shape[:-1], q.d_out)


def qalora_forward(layer: QuantLinearLayer, x) -> np.ndarray:
    """Quantized base output plus the pooled adapter term."""
    x = _check_input(x, layer.d_in)
    y = quant_matvec(layer.base, x)
    ad = layer.adapter
    if ad is not None:
        u = group_sum_pool(x, layer.base.group_size)
        y = y + ad.s * matmul(matmul(u, ad.A), ad.B)
    return y


def qalora_backward(layer: QuantLinearLayer, x, g_out) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the adapter factors; the base is frozen and gets none.

    For a batch the per-example gradients are summed.
    """
    if layer.adapter is None:
        raise ValueError("layer has no adapter to differentiate")
    x = _check_input(x, layer.d_in)
    g_out = _check_grad(g_out, x, layer.d_out)
    ad = layer.adapter
    u = np.atleast_2d(group_sum_pool(x, layer.base.group_size))
    g2 = np.atleast_2d(g_out)
    hidden = matmul(u, ad.A)
    grad_B = ad.s * matmul(hidden.T, g2)
    grad_A = ad.s * matmul(u.T, matmul(g2, ad.B.T))
    return grad_A, grad_B


def qalora_input_grad(layer: QuantLinearLayer, g_out) -> np.ndarray:
    """Gradient with respect to the layer input (needed to chain layers)."""
    g_out = np.asarray(g_out, dtype=np.float64)
    dx = matmul(g_out, dequantize(layer.base).T)
    ad = layer.adapter
    if ad is not None:
        du = ad.s * matmul(matmul(g_out, ad.B.T), ad.A.T)
        dx = dx + group_sum_pool_transpose(du, layer.base.group_size)
    return dx


def merge(layer: QuantLinearLayer) -> QuantizedMatrix:
    """Fold the pooled adapter into the base's zero points.

    Codes, scales, bit width and group size are untouched; zeros become
    ``zeros - s * (A B) / scales`` and stay real valued.
    """
    ad = layer.adapter
    if ad is None:
        raise ValueError("layer has no adapter to merge")
    base = layer.base
    return base.with_zeros(base.zeros - ad.s * ad.product / base.scales)


def effective_delta(adapter: AdapterPair, group_size: int, d_in: int) -> np.ndarray:
    """Dense weight change implied by a pooled adapter; rows repeat within each group."""
    L = adapter.A.shape[0]
    if group_size * L != d_in:
        raise ValueError(f"group_size {group_size} x groups {L} != d_in {d_in}")
    return np.repeat(adapter.s * adapter.product, group_size, axis=0)


def lora_forward(w, A_full, B, s: float, x) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    A_full = np.asarray(A_full, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A_full.shape[0] != w.shape[0] or B.shape[1] != w.shape[1] or A_full.shape[1] != B.shape[0]:
        raise ValueError(f"LoRA shapes do not fit: w {w.shape}, A {A_full.shape}, B {B.shape}")
    x = _check_input(x, w.shape[0])
    return matmul(x, w) + s * matmul(matmul(x, A_full), B)


def lora_merge(w, A_full, B, s: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    A_full = np.asarray(A_full, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A_full.shape[0] != w.shape[0] or B.shape[1] != w.shape[1] or A_full.shape[1] != B.shape[0]:
        raise ValueError(f"LoRA shapes do not fit: w {w.shape}, A {A_full.shape}, B {B.shape}")
    return w + s * matmul(A_full, B)


def lora_backward(layer: DenseLayer, x, g_out) -> tuple[np.ndarray, np.ndarray]:
    if layer.adapter is None:
        raise ValueError("layer has no adapter to differentiate")
    x = np.atleast_2d(_check_input(x, layer.d_in))
    g2 = np.atleast_2d(_check_grad(g_out, x, layer.d_out))
    ad = layer.adapter
    grad_B = ad.s * matmul(matmul(x, ad.A).T, g2)
    grad_A = ad.s * matmul(x.T, matmul(g2, ad.B.T))
    return grad_A, grad_B


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    ad = layer.adapter
    if ad is None:
        return matmul(_check_input(x, layer.d_in), layer.weight)
    return lora_forward(layer.weight, ad.A, ad.B, ad.s, x)


def dense_input_grad(layer: DenseLayer, g_out) -> np.ndarray:
    g_out = np.asarray(g_out, dtype=np.float64)
    dx = matmul(g_out, layer.weight.T)
    ad = layer.adapter
    if ad is not None:
        dx = dx + ad.s * matmul(matmul(g_out, ad.B.T), ad.A.T)
    return dx


def count_adapter_params(num_groups: int, rank: int, d_out: int) -> int:
    """Trainable parameters of one pooled adapter; ``num_groups = d_in`` gives plain LoRA."""
    if min(num_groups, rank, d_out) < 1:
        raise ValueError("all dimensions must be >= 1")
    return num_groups * rank + rank * d_out


def relative_discrepancy(reference, other) -> float:
    """``max|other - reference| / max|reference|`` (absolute when the reference is zero)."""
    reference = np.asarray(reference, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    denom = float(np.max(np.abs(reference))) if reference.size else 0.0
    diff = float(np.max(np.abs(other - reference))) if reference.size else 0.0
    return diff / denom if denom > 0 else diff
