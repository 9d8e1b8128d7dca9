"""Min-max weight quantization, sub-byte code packing and de-quantization.

A weight column is cut into groups of ``group_size`` consecutive rows. Each
(group, column) pair gets its own scale and zero point and every weight is
stored as an unsigned ``bits``-wide code::

    w ~= scale * (code - zero)

Zeros live in code-step units and are real valued, so a merged adapter can
shift them by a non-integer amount without touching the codes.

Packed layout: column-major, one column's ``d_in`` codes form a continuous
LSB-first bitstream padded with zero bits to the next byte boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numba
import numpy as np

from .numkit import as_matrix, as_vector

SUPPORTED_BITS = (2, 3, 4, 8)


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")


def round_half_away(t: np.ndarray) -> np.ndarray:
    return np.sign(t) * np.floor(np.abs(t) + 0.5)


def packed_column_bytes(d_in: int, bits: int) -> int:
    """Bytes used by one packed column of ``d_in`` codes."""
    return (d_in * bits + 7) // 8


# -- packing -----------------------------------------------------------------


@numba.njit(cache=True)
def _pack_stream(codes, bits, out, byte_offset):
    for i in range(codes.shape[0]):
        pos = i * bits
        b = byte_offset + (pos >> 3)
        shift = pos & 7
        value = np.int64(codes[i]) << shift
        out[b] |= np.uint8(value & 0xFF)
        if shift + bits > 8:
            out[b + 1] |= np.uint8(value >> 8)


@numba.njit(cache=True)
def unpack_range(packed, byte_offset, first, count, bits, out):
    """Decode codes ``first .. first+count`` of the stream at ``byte_offset`` into ``out``."""
    mask = (1 << bits) - 1
    for k in range(count):
        pos = (first + k) * bits
        b = byte_offset + (pos >> 3)
        shift = pos & 7
        value = np.int64(packed[b]) >> shift
        if shift + bits > 8:
            value |= np.int64(packed[b + 1]) << (8 - shift)
        out[k] = value & mask


@numba.njit(cache=True)
def _pack_columns(columns, bits, col_bytes, out):
    for j in range(columns.shape[0]):
        _pack_stream(columns[j], bits, out, j * col_bytes)


@numba.njit(cache=True)
def _unpack_columns(packed, bits, col_bytes, out):
    for j in range(out.shape[0]):
        unpack_range(packed, j * col_bytes, 0, out.shape[1], bits, out[j])


def _checked_codes(codes, bits: int) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (not np.issubdtype(codes.dtype, np.integer) and not np.all(codes == np.round(codes))):
        raise ValueError("codes must be integers")
    if codes.size and (codes.min() < 0 or codes.max() >= 1 << bits):
        raise ValueError(f"code out of range for {bits}-bit packing")
    return codes.astype(np.uint8)


def pack_codes(codes, bits: int) -> bytes:
    """Pack unsigned codes into a continuous LSB-first bitstream.

    >>> pack_codes([5, 10], 4).hex()
    'a5'
    >>> pack_codes([7, 0, 5], 3).hex()
    '4701'
    """
    _check_bits(bits)
    codes = _checked_codes(codes, bits)
    if codes.ndim != 1:
        raise ValueError("pack_codes expects a flat code array")
    out = np.zeros((codes.size * bits + 7) // 8, dtype=np.uint8)
    _pack_stream(codes, bits, out, 0)
    return out.tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes` for the first ``count`` codes."""
    _check_bits(bits)
    needed = (count * bits + 7) // 8
    if len(data) < needed:
        raise ValueError(f"need {needed} bytes for {count} {bits}-bit codes, got {len(data)}")
    out = np.empty(count, dtype=np.uint8)
    unpack_range(np.frombuffer(bytes(data[:needed]), dtype=np.uint8), 0, 0, count, bits, out)
    return out


def pack_matrix_codes(codes: np.ndarray, bits: int) -> bytes:
    """Column-major packing of a ``d_in x d_out`` code matrix, byte-padded per column."""
    _check_bits(bits)
    codes = _checked_codes(codes, bits)
    d_in, d_out = codes.shape
    col_bytes = packed_column_bytes(d_in, bits)
    out = np.zeros(col_bytes * d_out, dtype=np.uint8)
    _pack_columns(np.ascontiguousarray(codes.T), bits, col_bytes, out)
    return out.tobytes()


def unpack_matrix_codes(data: bytes, bits: int, d_in: int, d_out: int) -> np.ndarray:
    _check_bits(bits)
    col_bytes = packed_column_bytes(d_in, bits)
    if len(data) < col_bytes * d_out:
        raise ValueError(f"packed codes too short: {len(data)} < {col_bytes * d_out}")
    raw = np.frombuffer(bytes(data[: col_bytes * d_out]), dtype=np.uint8)
    columns = np.empty((d_out, d_in), dtype=np.uint8)
    _unpack_columns(raw, bits, col_bytes, columns)
    return columns.T.copy()


# -- quantized container ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    """Frozen group-quantized weight matrix.

    Attributes:
        d_in: Input dimension (rows).
        d_out: Output dimension (columns).
        bits: Code width.
        group_size: Rows per quantization group.
        packed: Column-major packed codes.
        scales: ``num_groups x d_out`` positive step sizes.
        zeros: ``num_groups x d_out`` zero points in code units.
    """

    d_in: int
    d_out: int
    bits: int
    group_size: int
    packed: bytes
    scales: np.ndarray
    zeros: np.ndarray

    def __post_init__(self):
        _check_bits(self.bits)
        if self.group_size < 1 or self.d_in % self.group_size:
            raise ValueError(f"group_size {self.group_size} does not divide d_in {self.d_in}")
        shape = (self.num_groups, self.d_out)
        scales = as_matrix(self.scales, "scales")
        zeros = as_matrix(self.zeros, "zeros")
        if scales.shape != shape or zeros.shape != shape:
            raise ValueError(f"scales/zeros must have shape {shape}, got {scales.shape}/{zeros.shape}")
        if np.any(scales <= 0):
            raise ValueError("all scales must be positive")
        expected = packed_column_bytes(self.d_in, self.bits) * self.d_out
        if len(self.packed) != expected:
            raise ValueError(f"packed codes must hold {expected} bytes, got {len(self.packed)}")
        object.__setattr__(self, "packed", bytes(self.packed))
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "zeros", zeros)

    @classmethod
    def from_codes(cls, codes, scales, zeros, bits: int, group_size: int) -> "QuantizedMatrix":
        codes = np.asarray(codes)
        d_in, d_out = codes.shape
        return cls(d_in, d_out, bits, group_size, pack_matrix_codes(codes, bits), scales, zeros)

    @cached_property
    def packed_array(self) -> np.ndarray:
        return np.frombuffer(self.packed, dtype=np.uint8)

    @property
    def num_groups(self) -> int:
        return self.d_in // self.group_size

    @property
    def shape(self) -> tuple[int, int]:
        return (self.d_in, self.d_out)

    @cached_property
    def codes(self) -> np.ndarray:
        """Unpacked ``d_in x d_out`` code matrix (cached, read-only)."""
        out = unpack_matrix_codes(self.packed, self.bits, self.d_in, self.d_out)
        out.setflags(write=False)
        return out

    def with_zeros(self, zeros) -> "QuantizedMatrix":
        return QuantizedMatrix(
            self.d_in, self.d_out, self.bits, self.group_size, self.packed, self.scales, zeros
        )

    def same_codes_and_scales(self, other: "QuantizedMatrix") -> bool:
        return (
            self.shape == other.shape
            and self.bits == other.bits
            and self.group_size == other.group_size
            and self.packed == other.packed
            and np.array_equal(self.scales, other.scales)
        )

    def bitwise_equal(self, other: "QuantizedMatrix") -> bool:
        return self.same_codes_and_scales(other) and np.array_equal(self.zeros, other.zeros)


# -- quantization ---------------------------------------------------------------


def _minmax_params(lo: np.ndarray, hi: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    levels = (1 << bits) - 1
    scale = (hi - lo) / levels
    # Constant groups: unit step, every code 0, zero absorbs the value.
    scale = np.where(hi == lo, 1.0, scale)
    zero = -lo / scale
    return scale, zero


def quantize_minmax(v, bits: int) -> tuple[np.ndarray, float, float]:
    """Min-max quantize one vector with a single (scale, zero) pair.

    Returns ``(codes, scale, zero)`` with ``v ~= scale * (codes - zero)``.
    Ties round away from zero.
    """
    _check_bits(bits)
    v = as_vector(v, "v")
    if v.size == 0:
        raise ValueError("cannot quantize an empty vector")
    lo, hi = v.min(), v.max()
    scale, zero = _minmax_params(np.array(lo), np.array(hi), bits)
    codes = np.clip(round_half_away((v - lo) / scale), 0, (1 << bits) - 1).astype(np.int64)
    return codes, float(scale), float(zero)


def quantize_groupwise(w, bits: int, group_size: int) -> QuantizedMatrix:
    """Quantize every ``group_size`` slice of every column independently.

    ``group_size == d_in`` gives plain per-column quantization.
    """
    _check_bits(bits)
    w = as_matrix(w, "w")
    d_in, d_out = w.shape
    if group_size < 1 or d_in % group_size:
        raise ValueError(f"group_size {group_size} does not divide d_in {d_in}")
    groups = w.reshape(d_in // group_size, group_size, d_out)
    lo = groups.min(axis=1)
    hi = groups.max(axis=1)
    scale, zero = _minmax_params(lo, hi, bits)
    t = (groups - lo[:, None, :]) / scale[:, None, :]
    codes = np.clip(round_half_away(t), 0, (1 << bits) - 1).astype(np.uint8)
    return QuantizedMatrix.from_codes(codes.reshape(d_in, d_out), scale, zero, bits, group_size)


def rtn_requantize(w, bits: int, group_size: int) -> QuantizedMatrix:
    """Round-to-nearest post-training quantization of an already merged FP matrix.

    Same arithmetic as :func:`quantize_groupwise`; kept under its own name so the
    merge-then-quantize baseline reads explicitly.
    """
    return quantize_groupwise(w, bits, group_size)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    g = q.group_size
    scales = np.repeat(q.scales, g, axis=0)
    zeros = np.repeat(q.zeros, g, axis=0)
    return scales * (q.codes - zeros)


def roundtrip_bound(q: QuantizedMatrix) -> np.ndarray:
    """Per-entry worst-case round-trip error, half a step of the entry's group."""
    return np.repeat(q.scales, q.group_size, axis=0) / 2.0
