"""Asymmetric compression of a split FFN.

Low-rank mode factorizes only the tail and leaves the heavy-hitter
weights untouched. Quantized mode quantizes everything but gives heavy
hitters more bits than the tail. Both modes take a dense-tail split as
input and return a new split; inputs are never mutated.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyCalibrationError,
    FormatError,
    NothingToCompressError,
    RangeError,
    ShapeError,
)
from .ffn import (
    DenseTail,
    FfnLayer,
    LowRankTail,
    QuantizedTail,
    SplitFfn,
    ffn_forward,
    split_forward,
)
from .linalg import frobenius_norm_sq, truncated_svd
from .quant import quantize_matrix
from .validation import check_bits, check_fraction, check_matrix, check_positive, floor_scaled

COMPRESSION_MODES = ("lowrank", "quant")


@dataclass(frozen=True)
class CompressionPlan:
    """Knobs that fully determine a compressed artifact."""

    mode: str = "lowrank"
    keep_frac: float = 0.25
    rank_frac: float = 0.10
    hh_bits: int = 8
    tail_bits: int = 3
    group_size: int = 128

    def __post_init__(self):
        if self.mode not in COMPRESSION_MODES:
            raise RangeError(f"mode must be one of {COMPRESSION_MODES}, got {self.mode!r}")
        check_fraction(self.keep_frac, "keep_frac")
        check_fraction(self.rank_frac, "rank_frac")
        check_bits(self.hh_bits, "hh_bits")
        check_bits(self.tail_bits, "tail_bits")
        check_positive(self.group_size, "group_size")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "CompressionPlan":
        try:
            return cls(**doc)
        except TypeError as exc:
            raise FormatError(f"malformed compression plan: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "CompressionPlan":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"compression plan is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise FormatError("compression plan must be a JSON object")
        return cls.from_dict(doc)


def tail_rank(model_dim: int, tail_width: int, rank_frac: float) -> int:
    """Target rank for the tail factors: max(1, floor(rank_frac * full rank)).

    "Full rank" is min(model_dim, tail_width), the shared dimension bound
    of the two tail blocks.
    """
    check_fraction(rank_frac, "rank_frac")
    if tail_width < 1:
        raise NothingToCompressError("tail has no neurons")
    full = min(model_dim, tail_width)
    return max(1, floor_scaled(rank_frac, full))


def compress_lowrank(split: SplitFfn, rank_frac: float) -> SplitFfn:
    """Replace the dense tail by truncated-SVD factors; heavy part untouched.

    Both tail blocks are factorized independently at the same rank. The
    returned split shares the heavy-hitter arrays with the input
    bit-identically.
    """
    if not isinstance(split.tail, DenseTail):
        raise ShapeError("low-rank compression expects a dense tail")
    if split.tail.width == 0:
        raise NothingToCompressError("split has an empty tail; nothing to factorize")
    r = tail_rank(split.model_dim, split.tail.width, rank_frac)
    tail = LowRankTail(
        up_factors=truncated_svd(split.tail.up, r),
        down_factors=truncated_svd(split.tail.down, r))
    return dataclasses.replace(split, tail=tail)


def compress_quant(split: SplitFfn, plan: CompressionPlan) -> SplitFfn:
    """Quantize heavy part at plan.hh_bits and tail at plan.tail_bits.

    Weights are stored transposed (one output neuron per row) so that
    quantization groups run along the reduction axis of each product.
    An empty tail is legal; then only the heavy part is quantized.
    """
    if plan.mode != "quant":
        raise RangeError(f"plan mode must be 'quant', got {plan.mode!r}")
    if not isinstance(split.tail, DenseTail):
        raise ShapeError("quantization expects a dense tail")
    if not isinstance(split.heavy_up, np.ndarray):
        raise ShapeError("heavy part is already quantized")
    heavy_up_q = quantize_matrix(
        np.ascontiguousarray(split.heavy_up.T), plan.hh_bits, plan.group_size)
    heavy_down_q = quantize_matrix(
        np.ascontiguousarray(split.heavy_down.T), plan.hh_bits, plan.group_size)
    tail = QuantizedTail(
        up_q=quantize_matrix(
            np.ascontiguousarray(split.tail.up.T), plan.tail_bits, plan.group_size),
        down_q=quantize_matrix(
            np.ascontiguousarray(split.tail.down.T), plan.tail_bits, plan.group_size))
    return dataclasses.replace(
        split, heavy_up=heavy_up_q, heavy_down=heavy_down_q, tail=tail)


@dataclass(frozen=True)
class EvalResult:
    mse: float  # mean squared error per output element
    rel_err: float  # global relative Frobenius error


def eval_compression(original: FfnLayer, compressed: SplitFfn, calib,
                     quant_path: str = "fused") -> EvalResult:
    """Forward-output error of ``compressed`` against ``original``."""
    batches = list(calib)
    if not batches:
        raise EmptyCalibrationError("evaluation needs at least one calibration batch")
    if original.model_dim != compressed.model_dim:
        raise ShapeError(
            f"model dims differ: {original.model_dim} vs {compressed.model_dim}")
    if original.width != compressed.original_width:
        raise ShapeError(
            f"layer width {original.width} != split original width "
            f"{compressed.original_width}")
    sq_diff = 0.0
    sq_ref = 0.0
    elements = 0
    for x in batches:
        x = check_matrix(x, "calibration batch")
        ref = ffn_forward(original, x)
        out = split_forward(compressed, x, quant_path=quant_path)
        sq_diff += frobenius_norm_sq(ref - out)
        sq_ref += frobenius_norm_sq(ref)
        elements += ref.size
    if sq_ref > 0.0:
        rel = math.sqrt(sq_diff / sq_ref)
    else:
        rel = 0.0 if sq_diff == 0.0 else math.inf
    return EvalResult(mse=sq_diff / elements, rel_err=rel)
