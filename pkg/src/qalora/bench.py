"""Micro-benchmark: packed quantized layer vs float64 layer on one input vector."""

from __future__ import annotations

import statistics
import time

import numpy as np

from .adapter import count_adapter_params, quant_matvec
from .container import fp_blob_size, quant_blob_size
from .numkit import matmul
from .quant import QuantizedMatrix, quantize_groupwise


def _packed_forward(q: QuantizedMatrix, x: np.ndarray) -> np.ndarray:
    # Rebuild from the packed bytes every call so unpacking is part of the timing.
    fresh = QuantizedMatrix(q.d_in, q.d_out, q.bits, q.group_size, q.packed, q.scales, q.zeros)
    return quant_matvec(fresh, x)


def _median_ns(fn, iters: int) -> float:
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return float(statistics.median(samples))


def run_bench(d_in: int, d_out: int, bits: int, group_size: int, iters: int,
              rank: int = 16, seed: int = 0) -> dict:
    if min(d_in, d_out, group_size, iters, rank) < 1 or d_in % group_size:
        raise ValueError("invalid benchmark dimensions")
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
    x = rng.normal(size=d_in)
    q = quantize_groupwise(w, bits, group_size)
    # Warm-up compiles the kernels outside the timed region.
    _packed_forward(q, x)
    matmul(x, w)
    groups = d_in // group_size
    quant_bytes = quant_blob_size(d_in, d_out, bits, group_size)
    fp_bytes = fp_blob_size(d_in, d_out)
    return {
        "d_in": d_in,
        "d_out": d_out,
        "bits": bits,
        "group_size": group_size,
        "iters": iters,
        "quant_ns_per_forward": _median_ns(lambda: _packed_forward(q, x), iters),
        "fp_ns_per_forward": _median_ns(lambda: matmul(x, w), iters),
        "quant_bytes": quant_bytes,
        "fp64_bytes": fp_bytes,
        "storage_ratio": quant_bytes / fp_bytes,
        "rank": rank,
        "qalora_adapter_params": count_adapter_params(groups, rank, d_out),
        "lora_adapter_params": count_adapter_params(d_in, rank, d_out),
    }
