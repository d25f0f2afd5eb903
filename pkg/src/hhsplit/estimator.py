"""Scikit-learn style wrappers around the compression pipeline.

These estimators make the calibrate/select/compress flow compose with the
usual tooling (get_params/set_params, clone, Pipeline): fit consumes
calibration tokens, transform runs inputs through the compressed layer.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .compress import CompressionPlan, compress_lowrank, compress_quant, eval_compression
from .errors import ShapeError
from .ffn import split_ffn, split_forward
from .profiler import NeuronStats, accumulate, importance, select_heavy_hitters
from .validation import check_matrix


def _as_batches(X) -> list[np.ndarray]:
    """Accept one (tokens, d) array or a sequence of them."""
    if isinstance(X, np.ndarray):
        if X.ndim != 2:
            raise ShapeError(f"calibration input must be 2-D, got shape {X.shape}")
        return [check_matrix(X, "X")]
    batches = [check_matrix(b, "calibration batch") for b in X]
    return batches


class HeavyHitterProfiler(BaseEstimator):
    """Accumulates per-neuron importance statistics of ``layer``.

    fit(X) profiles calibration tokens (one 2-D array or a list of
    batches); partial_fit streams additional batches. After fitting,
    ``scores_`` and ``sorted_order_`` describe neuron importance and
    ``select(keep_frac)`` returns a heavy-hitter set.
    """

    def __init__(self, layer=None, layer_index=0):
        self.layer = layer
        self.layer_index = layer_index

    def fit(self, X, y=None):
        if hasattr(self, "stats_"):
            del self.stats_
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        if self.layer is None:
            raise ValueError("HeavyHitterProfiler needs a layer to profile")
        if not hasattr(self, "stats_"):
            self.stats_ = NeuronStats.for_layer(self.layer, self.layer_index)
        for batch in _as_batches(X):
            accumulate(self.stats_, self.layer, batch)
        self.report_ = importance(self.stats_)
        self.scores_ = self.report_.scores
        self.sorted_order_ = self.report_.sorted_order
        return self

    def select(self, keep_frac):
        if not hasattr(self, "report_"):
            raise NotFittedError("HeavyHitterProfiler is not fitted yet")
        return select_heavy_hitters(self.report_, keep_frac)


class FfnCompressor(BaseEstimator, TransformerMixin):
    """Calibrate, split, and compress an FFN layer; transform runs it.

    fit(X) profiles the calibration tokens, selects the top ``keep_frac``
    neurons as heavy hitters, splits the layer, and compresses the split
    according to ``mode`` ("lowrank" factorizes the tail and keeps heavy
    hitters untouched; "quant" quantizes heavy hitters at ``hh_bits`` and
    the tail at ``tail_bits``). transform(X) is the compressed forward
    pass; score(X) is the negative forward MSE against the original layer.

    A keep fraction of 1 leaves nothing to compress in low-rank mode; the
    split is kept dense in that case.
    """

    def __init__(self, layer=None, mode="lowrank", keep_frac=0.25, rank_frac=0.10,
                 hh_bits=8, tail_bits=3, group_size=128, quant_path="fused"):
        self.layer = layer
        self.mode = mode
        self.keep_frac = keep_frac
        self.rank_frac = rank_frac
        self.hh_bits = hh_bits
        self.tail_bits = tail_bits
        self.group_size = group_size
        self.quant_path = quant_path

    def fit(self, X, y=None):
        if self.layer is None:
            raise ValueError("FfnCompressor needs a layer to compress")
        plan = CompressionPlan(mode=self.mode, keep_frac=self.keep_frac,
                               rank_frac=self.rank_frac, hh_bits=self.hh_bits,
                               tail_bits=self.tail_bits, group_size=self.group_size)
        profiler = HeavyHitterProfiler(layer=self.layer).fit(X)
        hh = profiler.select(self.keep_frac)
        split = split_ffn(self.layer, hh)
        if plan.mode == "quant":
            split = compress_quant(split, plan)
        elif split.tail.width > 0:
            split = compress_lowrank(split, self.rank_frac)
        self.plan_ = plan
        self.heavy_hitters_ = hh
        self.importance_report_ = profiler.report_
        self.split_ = split
        return self

    def transform(self, X):
        self._check_fitted()
        return split_forward(self.split_, check_matrix(X, "X"),
                             quant_path=self.quant_path)

    def score(self, X, y=None):
        """Negative forward MSE against the uncompressed layer (higher is better)."""
        self._check_fitted()
        result = eval_compression(self.layer, self.split_, _as_batches(X),
                                  quant_path=self.quant_path)
        return -result.mse

    def _check_fitted(self):
        if not hasattr(self, "split_"):
            raise NotFittedError("FfnCompressor is not fitted yet")
