"""Group-wise round-to-nearest affine quantization with bit packing.

Quantization groups are contiguous runs of ``group_size`` entries along
each row (the final group of a row may be ragged). Codes are packed
little-endian bit-first within bytes and each row is padded to a byte
boundary so rows can be sliced independently.

Quantized weight matrices elsewhere in the package are stored transposed,
one output neuron per row, so that groups run along the reduction axis of
the product they participate in; ``matmul_quantized`` computes against
that orientation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, RangeError, ShapeError
from .linalg import matmul
from .validation import check_bits, check_matrix, check_positive


def _group_starts(cols: int, group_size: int) -> np.ndarray:
    return np.arange(0, cols, group_size, dtype=np.int64)


def _group_lengths(cols: int, group_size: int) -> np.ndarray:
    starts = _group_starts(cols, group_size)
    return np.diff(np.append(starts, cols))


@dataclass(frozen=True)
class QuantizedMatrix:
    """Bit-packed codes plus per-group float32 scale and zero-point."""

    rows: int
    cols: int
    bits: int
    group_size: int
    packed: np.ndarray  # uint8, (rows, row_bytes)
    scales: np.ndarray  # float32, (rows, n_groups)
    zeros: np.ndarray  # float32, (rows, n_groups)

    def __post_init__(self):
        check_bits(self.bits)
        check_positive(self.group_size, "group_size")
        packed = np.ascontiguousarray(np.asarray(self.packed, dtype=np.uint8))
        scales = np.ascontiguousarray(np.asarray(self.scales, dtype=np.float32))
        zeros = np.ascontiguousarray(np.asarray(self.zeros, dtype=np.float32))
        if packed.shape != (self.rows, self.row_bytes):
            raise FormatError(
                f"packed buffer shape {packed.shape} does not match "
                f"{self.rows}x{self.cols} at {self.bits} bits")
        expect = (self.rows, self.n_groups)
        if scales.shape != expect or zeros.shape != expect:
            raise FormatError(
                f"scale/zero shapes {scales.shape}/{zeros.shape}, expected {expect}")
        object.__setattr__(self, "packed", packed)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "zeros", zeros)

    @property
    def n_groups(self) -> int:
        return (self.cols + self.group_size - 1) // self.group_size

    @property
    def row_bytes(self) -> int:
        return (self.cols * self.bits + 7) // 8

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack (rows, cols) codes into (rows, ceil(cols*bits/8)) bytes."""
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    rows, cols = codes.shape
    if cols == 0:
        return np.zeros((rows, 0), dtype=np.uint8)
    if codes.size and (int(codes.max()) >> bits):
        raise FormatError(f"code exceeds {bits}-bit range")
    planes = (codes[:, :, None] >> np.arange(bits, dtype=np.uint8)) & 1
    flat = planes.reshape(rows, cols * bits)
    return np.packbits(flat, axis=1, bitorder="little")


def unpack_codes(packed: np.ndarray, rows: int, cols: int, bits: int) -> np.ndarray:
    """Inverse of pack_codes; rejects corrupt padding or mis-sized buffers."""
    row_bytes = (cols * bits + 7) // 8
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.shape != (rows, row_bytes):
        raise FormatError(
            f"packed buffer shape {packed.shape}, expected {(rows, row_bytes)}")
    if cols == 0 or rows == 0:
        return np.zeros((rows, cols), dtype=np.uint8)
    flat = np.unpackbits(packed, axis=1, bitorder="little")
    used, pad = flat[:, : cols * bits], flat[:, cols * bits:]
    if pad.size and pad.any():
        raise FormatError("nonzero padding bits in packed payload")
    weights = (1 << np.arange(bits, dtype=np.uint16))
    codes = (used.reshape(rows, cols, bits).astype(np.uint16) * weights).sum(axis=2)
    return codes.astype(np.uint8)


def quantize_matrix(w, bits: int, group_size: int) -> QuantizedMatrix:
    """Round-to-nearest affine quantization of ``w`` per row group.

    Per group: scale = (max - min) / (2^bits - 1) (scale 1 when the group
    is constant), zero-point = min, code = round((w - zero) / scale) with
    halves rounded away from zero, clamped to the code range. Every
    dequantized entry lies within scale/2 (plus float32 rounding) of the
    original.
    """
    w = check_matrix(w, "w")
    bits = check_bits(bits)
    group_size = check_positive(group_size, "group_size")
    rows, cols = w.shape
    levels = (1 << bits) - 1
    if cols == 0 or rows == 0:
        n_groups = (cols + group_size - 1) // group_size
        return QuantizedMatrix(
            rows=rows, cols=cols, bits=bits, group_size=group_size,
            packed=np.zeros((rows, (cols * bits + 7) // 8), np.uint8),
            scales=np.ones((rows, n_groups), np.float32),
            zeros=np.zeros((rows, n_groups), np.float32))
    starts = _group_starts(cols, group_size)
    lengths = _group_lengths(cols, group_size)
    mn = np.minimum.reduceat(w, starts, axis=1).astype(np.float64)
    mx = np.maximum.reduceat(w, starts, axis=1).astype(np.float64)
    scale64 = (mx - mn) / levels
    scale64[mx == mn] = 1.0
    scales = scale64.astype(np.float32)
    # Subnormal group ranges can round to a zero float32 scale; fall back to
    # the constant-group convention rather than divide by zero.
    scales[scales == 0.0] = 1.0
    zeros = mn.astype(np.float32)
    # Codes are computed against the stored float32 scale/zero so the
    # round-trip bound holds for exactly what dequantize will use.
    scale_full = np.repeat(scales.astype(np.float64), lengths, axis=1)
    zero_full = np.repeat(zeros.astype(np.float64), lengths, axis=1)
    t = (w.astype(np.float64) - zero_full) / scale_full
    codes = np.clip(np.floor(t + 0.5), 0, levels).astype(np.uint8)
    return QuantizedMatrix(
        rows=rows, cols=cols, bits=bits, group_size=group_size,
        packed=pack_codes(codes, bits), scales=scales, zeros=zeros)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    """Reconstruct the float32 matrix: code * scale + zero per element."""
    codes = unpack_codes(q.packed, q.rows, q.cols, q.bits)
    if q.cols == 0 or q.rows == 0:
        return np.zeros((q.rows, q.cols), np.float32)
    lengths = _group_lengths(q.cols, q.group_size)
    scale_full = np.repeat(q.scales.astype(np.float64), lengths, axis=1)
    zero_full = np.repeat(q.zeros.astype(np.float64), lengths, axis=1)
    return (codes.astype(np.float64) * scale_full + zero_full).astype(np.float32)


def matmul_quantized(x, q: QuantizedMatrix, path: str = "fused") -> np.ndarray:
    """Product ``x @ W.T`` where W is stored quantized as (out, in).

    ``path="reference"`` dequantizes W fully and multiplies densely.
    ``path="fused"`` accumulates group by group, applying each group's
    scale and zero-point during accumulation without materializing W.
    The two paths agree to within ~1e-7 relative.
    """
    x = check_matrix(x, "x")
    if x.shape[1] != q.cols:
        raise ShapeError(f"cannot multiply {x.shape} by quantized {q.shape}.T")
    if path == "reference":
        return matmul(x, dequantize(q).T)
    if path != "fused":
        raise RangeError(f"unknown quantized matmul path {path!r}")
    out = np.zeros((x.shape[0], q.rows), np.float64)
    if q.cols == 0 or q.rows == 0:
        return out.astype(np.float32)
    codes = unpack_codes(q.packed, q.rows, q.cols, q.bits).astype(np.float64)
    x64 = x.astype(np.float64)
    scales = q.scales.astype(np.float64)
    zeros = q.zeros.astype(np.float64)
    starts = _group_starts(q.cols, q.group_size)
    lengths = _group_lengths(q.cols, q.group_size)
    for g, (start, length) in enumerate(zip(starts, lengths)):
        xg = x64[:, start:start + length]
        out += (xg @ codes[:, start:start + length].T) * scales[:, g]
        out += np.outer(xg.sum(axis=1), zeros[:, g])
    return out.astype(np.float32)
