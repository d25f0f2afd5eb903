import json

import numpy as np
import pytest

from hhsplit.checkpoint import gen_calibration, gen_synthetic_model
from hhsplit.errors import (
    DegenerateAblationError,
    EmptyCalibrationError,
    FormatError,
    RangeError,
    ShapeError,
)
from hhsplit.ffn import FfnLayer
from hhsplit.profiler import (
    ImportanceReport,
    NeuronStats,
    ablate_and_measure,
    ablation_residual,
    accumulate,
    importance,
    norm_distribution,
    select_heavy_hitters,
    stats_from_json,
    stats_to_json,
)

from oracles import GELU_AT_1_SQ


def _layer(d, d_ff, seed):
    rng = np.random.default_rng(seed)
    s = 1.0 / np.sqrt(d)
    return FfnLayer(up=(rng.standard_normal((d, d_ff)) * s).astype(np.float32),
                    down=(rng.standard_normal((d_ff, d)) * s).astype(np.float32))


def _x(s, d, seed):
    return np.random.default_rng(seed).standard_normal((s, d)).astype(np.float32)


IDENTITY_LAYER = FfnLayer(up=np.eye(2, dtype=np.float32),
                          down=np.array([[2.0, 0.0], [0.0, 1.0]], np.float32))


class TestAccumulate:
    def test_zero_batch_only_counts_tokens(self):
        layer = _layer(4, 8, 0)
        stats = NeuronStats.for_layer(layer)
        accumulate(stats, layer, np.zeros((5, 4), np.float32))
        assert stats.tokens_seen == 5
        assert np.array_equal(stats.act_norm_sq, np.zeros(8))

    def test_two_batches_equal_concatenation_bit_exactly(self):
        layer = _layer(4, 8, 1)
        a, b = _x(3, 4, 2), _x(5, 4, 3)
        s1 = NeuronStats.for_layer(layer)
        accumulate(s1, layer, a)
        accumulate(s1, layer, b)
        s2 = NeuronStats.for_layer(layer)
        accumulate(s2, layer, np.vstack([a, b]))
        assert np.array_equal(s1.act_norm_sq, s2.act_norm_sq)
        assert s1.tokens_seen == s2.tokens_seen == 8

    def test_identity_layer_single_token(self):
        stats = NeuronStats.for_layer(IDENTITY_LAYER)
        accumulate(stats, IDENTITY_LAYER, np.array([[1.0, 0.0]], np.float32))
        assert abs(stats.act_norm_sq[0] - GELU_AT_1_SQ) <= 1e-5
        assert stats.act_norm_sq[1] == 0.0

    def test_batch_order_invariance(self):
        layer = _layer(6, 12, 4)
        batches = [_x(4, 6, 10 + i) for i in range(4)]
        s1 = NeuronStats.for_layer(layer)
        s2 = NeuronStats.for_layer(layer)
        for b in batches:
            accumulate(s1, layer, b)
        for b in reversed(batches):
            accumulate(s2, layer, b)
        rel = np.abs(s1.act_norm_sq - s2.act_norm_sq) / np.maximum(s1.act_norm_sq, 1e-300)
        assert rel.max() <= 1e-9

    def test_shape_mismatch(self):
        layer = _layer(4, 8, 5)
        stats = NeuronStats.for_layer(layer)
        with pytest.raises(ShapeError):
            accumulate(stats, layer, _x(3, 5, 6))
        with pytest.raises(ShapeError):
            accumulate(NeuronStats.for_layer(_layer(4, 9, 7)), layer, _x(3, 4, 8))


class TestImportance:
    def test_zero_down_rows_give_zero_scores(self):
        layer = FfnLayer(up=np.eye(3, dtype=np.float32), down=np.zeros((3, 3), np.float32))
        stats = NeuronStats.for_layer(layer)
        accumulate(stats, layer, _x(4, 3, 9))
        rep = importance(stats)
        assert np.array_equal(rep.scores, np.zeros(3))
        assert rep.sorted_order.tolist() == [0, 1, 2]

    def test_identity_example_scores(self):
        stats = NeuronStats.for_layer(IDENTITY_LAYER)
        accumulate(stats, IDENTITY_LAYER, np.array([[1.0, 0.0]], np.float32))
        rep = importance(stats)
        assert abs(rep.scores[0] - 4 * GELU_AT_1_SQ) <= 1e-5
        assert rep.scores[1] == 0.0
        assert rep.sorted_order.tolist() == [0, 1]

    def test_tie_break_is_ascending_index(self):
        rep = ImportanceReport(layer_index=0,
                               scores=np.array([2.0, 2.0, 2.0]),
                               sorted_order=np.argsort(-np.array([2.0, 2.0, 2.0]),
                                                       kind="stable"))
        assert rep.sorted_order.tolist() == [0, 1, 2]

    def test_requires_tokens(self):
        layer = _layer(4, 8, 10)
        with pytest.raises(EmptyCalibrationError):
            importance(NeuronStats.for_layer(layer))

    def test_scale_equivariance_of_down_rows(self):
        layer = _layer(4, 8, 11)
        x = _x(6, 4, 12)
        stats = NeuronStats.for_layer(layer)
        accumulate(stats, layer, x)
        base = importance(stats).scores
        scaled_layer = FfnLayer(up=layer.up, down=layer.down * np.float32(2.0))
        stats2 = NeuronStats.for_layer(scaled_layer)
        accumulate(stats2, scaled_layer, x)
        scaled = importance(stats2).scores
        assert np.allclose(scaled, 4.0 * base, rtol=1e-12, atol=0.0)


class TestSelect:
    def _report(self, scores):
        scores = np.asarray(scores, dtype=np.float64)
        return ImportanceReport(layer_index=0, scores=scores,
                                sorted_order=np.argsort(-scores, kind="stable"))

    def test_keep_all(self):
        rep = self._report([1.0, 2.0, 3.0, 4.0])
        assert select_heavy_hitters(rep, 1.0).indices.tolist() == [0, 1, 2, 3]

    def test_keep_none(self):
        rep = self._report([1.0, 2.0])
        assert len(select_heavy_hitters(rep, 0.0)) == 0

    def test_quarter_of_eight(self):
        # Top-2 of [5,1,9,0,2,2,0,7] by score are neurons 2 (9) and 7 (7).
        rep = self._report([5, 1, 9, 0, 2, 2, 0, 7])
        assert select_heavy_hitters(rep, 0.25).indices.tolist() == [2, 7]

    def test_monotone_in_fraction(self):
        rep = self._report(np.random.default_rng(13).standard_normal(16) ** 2)
        prev = set()
        for frac in (0.0, 0.125, 0.25, 0.5, 0.75, 1.0):
            cur = set(select_heavy_hitters(rep, frac).indices.tolist())
            assert prev <= cur
            prev = cur

    def test_fraction_out_of_range(self):
        rep = self._report([1.0, 2.0])
        with pytest.raises(RangeError):
            select_heavy_hitters(rep, 1.5)


class TestAblation:
    def test_dead_neuron_residual_is_zero(self):
        up = np.eye(3, dtype=np.float32)
        up[:, 2] = 0.0  # neuron 2 can never activate
        layer = FfnLayer(up=up, down=np.ones((3, 3), np.float32))
        calib = [_x(4, 3, 14)]
        assert ablation_residual(layer, [2], calib) == 0.0

    @pytest.mark.parametrize("j", [0, 3, 7])
    def test_single_neuron_matches_score(self, j):
        layer = _layer(6, 8, 15)
        calib = [_x(5, 6, 16 + i) for i in range(3)]
        stats = NeuronStats.for_layer(layer)
        for b in calib:
            accumulate(stats, layer, b)
        score = importance(stats).scores[j]
        residual = ablation_residual(layer, [j], calib)
        assert abs(residual - score) <= 1e-5 * score

    def test_planted_top_dominates_bottom(self):
        layer, _ = gen_synthetic_model(32, 128, 4, 10.0, seed=17)
        calib = gen_calibration(32, 32, 8, seed=18)
        stats = NeuronStats.for_layer(layer)
        for b in calib:
            accumulate(stats, layer, b)
        rep = importance(stats)
        top = ablate_and_measure(layer, rep, 0.03, "top", calib)
        bottom = ablate_and_measure(layer, rep, 0.03, "bottom", calib)
        assert top > 10.0 * bottom

    def test_degenerate_fraction(self):
        layer = _layer(4, 8, 19)
        rep = importance(accumulate(NeuronStats.for_layer(layer), layer, _x(3, 4, 20)))
        with pytest.raises(DegenerateAblationError):
            ablate_and_measure(layer, rep, 0.01, "top", [_x(3, 4, 21)])

    def test_fraction_bounds_and_which(self):
        layer = _layer(4, 8, 22)
        rep = importance(accumulate(NeuronStats.for_layer(layer), layer, _x(3, 4, 23)))
        with pytest.raises(RangeError):
            ablate_and_measure(layer, rep, 0.0, "top", [_x(3, 4, 24)])
        with pytest.raises(RangeError):
            ablate_and_measure(layer, rep, 0.5, "sideways", [_x(3, 4, 24)])

    def test_empty_calibration(self):
        layer = _layer(4, 8, 25)
        with pytest.raises(EmptyCalibrationError):
            ablation_residual(layer, [0], [])


class TestNormDistribution:
    def test_constant_scores_flat(self):
        rep = ImportanceReport(layer_index=0, scores=np.full(5, 3.0),
                               sorted_order=np.arange(5))
        assert np.array_equal(norm_distribution(rep), np.full(5, 3.0))

    def test_planted_model_has_plateau_then_tail(self):
        layer, planted = gen_synthetic_model(32, 64, 4, 10.0, seed=26)
        calib = gen_calibration(64, 32, 4, seed=27)
        stats = NeuronStats.for_layer(layer)
        for b in calib:
            accumulate(stats, layer, b)
        dist = norm_distribution(importance(stats))
        assert np.all(np.diff(dist) <= 0)
        assert dist[len(planted) - 1] > 20.0 * dist[len(planted)]


class TestStatsJson:
    def test_round_trip_is_exact(self):
        layer = _layer(4, 8, 28)
        stats = accumulate(NeuronStats.for_layer(layer, layer_index=3), layer, _x(6, 4, 29))
        back = stats_from_json(stats_to_json(stats))
        assert back.layer_index == 3
        assert back.tokens_seen == 6
        assert np.array_equal(back.act_norm_sq, stats.act_norm_sq)
        assert np.array_equal(back.down_row_norm_sq, stats.down_row_norm_sq)

    def test_schema_is_versioned(self):
        doc = json.loads(stats_to_json(NeuronStats.for_layer(_layer(2, 4, 30))))
        assert doc["version"] == 1
        assert set(doc) == {"version", "layer_index", "d_ff", "tokens_seen",
                            "act_norm_sq", "v_row_norm_sq"}

    def test_rejects_bad_documents(self):
        with pytest.raises(FormatError):
            stats_from_json("not json at all {")
        with pytest.raises(FormatError):
            stats_from_json(json.dumps({"version": 2}))
        good = json.loads(stats_to_json(NeuronStats.for_layer(_layer(2, 4, 31))))
        good["act_norm_sq"] = [1.0]  # wrong length
        with pytest.raises(FormatError):
            stats_from_json(json.dumps(good))
