"""Calibration profiling: per-neuron activation statistics and importance.

The importance of a neuron is its mean per-token squared activation norm
times the squared norm of its down-projection row. Deleting the neuron
changes the layer output by exactly that amount (in squared Frobenius
norm per token), so the score doubles as a removal-residual predictor;
ablate_and_measure checks that end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateAblationError,
    EmptyCalibrationError,
    FormatError,
    RangeError,
    ShapeError,
)
from .ffn import FfnLayer, HeavyHitterSet, ffn_forward, ffn_hidden, remove_neurons
from .linalg import frobenius_norm_sq
from .validation import check_fraction, check_matrix, floor_scaled

STATS_SCHEMA_VERSION = 1


@dataclass
class NeuronStats:
    """Accumulated per-neuron activation norms for one layer."""

    layer_index: int
    act_norm_sq: np.ndarray  # float64 (width,), summed over calibration tokens
    down_row_norm_sq: np.ndarray  # float64 (width,), fixed by the layer weights
    tokens_seen: int = 0

    @classmethod
    def for_layer(cls, layer: FfnLayer, layer_index: int = 0) -> "NeuronStats":
        down64 = layer.down.astype(np.float64)
        return cls(
            layer_index=layer_index,
            act_norm_sq=np.zeros(layer.width, np.float64),
            down_row_norm_sq=np.einsum("ij,ij->i", down64, down64),
            tokens_seen=0)

    @property
    def width(self) -> int:
        return int(self.act_norm_sq.shape[0])


@dataclass(frozen=True)
class ImportanceReport:
    """Per-neuron importance scores and the descending-score order."""

    layer_index: int
    scores: np.ndarray  # float64 (width,)
    sorted_order: np.ndarray  # int64 (width,), ties broken by ascending index


def accumulate(stats: NeuronStats, layer: FfnLayer, x) -> NeuronStats:
    """Fold one calibration batch into ``stats`` (mutates and returns it).

    Rows are accumulated sequentially in a fixed order, so accumulating
    two batches equals accumulating their concatenation bit-exactly.
    """
    x = check_matrix(x, "x")
    if x.shape[1] != layer.model_dim:
        raise ShapeError(f"batch width {x.shape[1]} != model dim {layer.model_dim}")
    if stats.width != layer.width:
        raise ShapeError(f"stats track {stats.width} neurons, layer has {layer.width}")
    hidden = ffn_hidden(layer, x).astype(np.float64)
    hidden *= hidden
    for row in hidden:
        stats.act_norm_sq += row
    stats.tokens_seen += x.shape[0]
    return stats


def importance(stats: NeuronStats) -> ImportanceReport:
    """Scores = (act_norm_sq / tokens_seen) * down_row_norm_sq."""
    if stats.tokens_seen <= 0:
        raise EmptyCalibrationError("no calibration tokens accumulated")
    scores = (stats.act_norm_sq / stats.tokens_seen) * stats.down_row_norm_sq
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    return ImportanceReport(layer_index=stats.layer_index, scores=scores, sorted_order=order)


def select_heavy_hitters(report: ImportanceReport, keep_frac: float) -> HeavyHitterSet:
    """Top floor(keep_frac * width) neurons by score, re-sorted ascending."""
    keep_frac = check_fraction(keep_frac, "keep_frac")
    k = floor_scaled(keep_frac, report.scores.shape[0])
    chosen = np.sort(report.sorted_order[:k])
    return HeavyHitterSet(layer_index=report.layer_index, indices=chosen)


def ablation_residual(layer: FfnLayer, indices, calib) -> float:
    """Mean per-token squared output residual after deleting ``indices``."""
    batches = list(calib)
    if not batches:
        raise EmptyCalibrationError("ablation needs at least one calibration batch")
    reduced = remove_neurons(layer, indices)
    total = 0.0
    tokens = 0
    for x in batches:
        x = check_matrix(x, "calibration batch")
        total += frobenius_norm_sq(ffn_forward(layer, x) - ffn_forward(reduced, x))
        tokens += x.shape[0]
    return total / tokens


def ablate_and_measure(layer: FfnLayer, report: ImportanceReport, frac: float,
                       which: str, calib) -> float:
    """Residual from removing the top or bottom floor(frac*width) neurons."""
    frac = float(frac)
    if not 0.0 < frac < 1.0:
        raise RangeError(f"ablation fraction must be in (0, 1), got {frac}")
    if which not in ("top", "bottom"):
        raise RangeError(f"which must be 'top' or 'bottom', got {which!r}")
    n = floor_scaled(frac, layer.width)
    if n == 0:
        raise DegenerateAblationError(
            f"fraction {frac} of {layer.width} neurons removes nothing")
    if which == "top":
        idx = report.sorted_order[:n]
    else:
        idx = report.sorted_order[layer.width - n:]
    return ablation_residual(layer, idx, calib)


def norm_distribution(report: ImportanceReport) -> np.ndarray:
    """Scores in descending order, for report/plot emission."""
    return report.scores[report.sorted_order].copy()


def stats_to_json(stats: NeuronStats) -> str:
    doc = {
        "version": STATS_SCHEMA_VERSION,
        "layer_index": int(stats.layer_index),
        "d_ff": stats.width,
        "tokens_seen": int(stats.tokens_seen),
        "act_norm_sq": stats.act_norm_sq.tolist(),
        "v_row_norm_sq": stats.down_row_norm_sq.tolist(),
    }
    return json.dumps(doc)


def stats_from_json(text: str) -> NeuronStats:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"stats document is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != STATS_SCHEMA_VERSION:
        raise FormatError(
            f"unsupported stats document version {doc.get('version') if isinstance(doc, dict) else doc!r}")
    try:
        width = int(doc["d_ff"])
        act = np.asarray(doc["act_norm_sq"], dtype=np.float64)
        down = np.asarray(doc["v_row_norm_sq"], dtype=np.float64)
        stats = NeuronStats(
            layer_index=int(doc["layer_index"]),
            act_norm_sq=act,
            down_row_norm_sq=down,
            tokens_seen=int(doc["tokens_seen"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed stats document: {exc}") from None
    if act.shape != (width,) or down.shape != (width,):
        raise FormatError(
            f"stats arrays have lengths {act.shape[0]}/{down.shape[0]}, header says {width}")
    if stats.tokens_seen < 0 or (act.size and act.min() < 0) or (down.size and down.min() < 0):
        raise FormatError("stats document contains negative accumulators")
    return stats
