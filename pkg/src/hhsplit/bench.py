"""Parameter counting, analytic FLOP model, and latency microbenchmarks.

Benchmarks time the dense versus split forward pass on the same fixed
random input, single-threaded by default (set HH_SPLIT_THREADS to opt
into more BLAS threads; the count is recorded in the report). Reported
times are medians over >= 11 repetitions after >= 3 warm-up runs.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .compress import CompressionPlan, tail_rank
from .errors import FormatError, MeasurementError, RangeError, ShapeError
from .ffn import (
    DenseTail,
    FfnLayer,
    LowRankTail,
    QuantizedTail,
    SplitFfn,
    ffn_forward,
    split_forward,
)
from .linalg import LowRankFactors
from .quant import QuantizedMatrix
from .validation import check_positive, floor_scaled

# Assumed FFN share of end-to-end transformer inference latency; used only
# for the clearly-labeled end-to-end speedup estimate.
FFN_LATENCY_SHARE = 2.0 / 3.0

REPORT_COLUMNS = [
    "d", "d_ff", "batch", "seq", "mode", "keep_frac", "rank_frac",
    "hh_bits", "tail_bits", "group_size", "baseline_ms", "split_ms",
    "speedup", "params_dense", "params_split", "reduction_frac",
]


@dataclass(frozen=True)
class ParamReport:
    """Closed-form parameter counts for a uniform stack of FFN layers."""

    d: int
    d_ff: int
    layers: int
    plan: CompressionPlan
    dense_ffn_per_layer: int
    compressed_ffn_per_layer: float
    mha_equiv_per_layer: int
    dense_ffn_total: int
    compressed_ffn_total: float
    mha_equiv_total: int
    reduction_frac_total: float

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["plan"] = self.plan.to_dict()
        return doc


def _plan_counts(d: int, d_ff: int, plan: CompressionPlan) -> tuple[int, float]:
    """(dense, compressed) parameter counts for one layer under ``plan``."""
    k = floor_scaled(plan.keep_frac, d_ff)
    m = d_ff - k
    dense = 2 * d * d_ff
    if plan.mode == "lowrank":
        if m == 0:
            return dense, float(dense)
        r = tail_rank(d, m, plan.rank_frac)
        return dense, float(2 * d * k + 2 * r * (d + m))
    gs = plan.group_size
    weight_equiv = (2 * d * k * plan.hh_bits + 2 * d * m * plan.tail_bits) / 32.0
    groups = (k * -(-d // gs) + d * -(-k // gs)
              + m * -(-d // gs) + d * -(-m // gs))
    return dense, weight_equiv + 2.0 * groups


def count_params(d: int, d_ff: int, layers: int, plan: CompressionPlan) -> ParamReport:
    """Parameter counts and total reduction fraction.

    Dense FFN is 2*d*d_ff per layer (no biases); low-rank compression is
    2*d*k + 2*r*(d+m); quantized weights count as weight_count*bits/32
    plus one float32 scale and zero-point per group. The reduction is
    measured against FFN-plus-attention totals, with attention entering
    only as the 4*d^2 per-layer reference.
    """
    check_positive(d, "d")
    check_positive(d_ff, "d_ff")
    check_positive(layers, "layers")
    dense, compressed = _plan_counts(d, d_ff, plan)
    mha = 4 * d * d
    saved = layers * (dense - compressed)
    denom = layers * (mha + dense)
    return ParamReport(
        d=d, d_ff=d_ff, layers=layers, plan=plan,
        dense_ffn_per_layer=dense,
        compressed_ffn_per_layer=compressed,
        mha_equiv_per_layer=mha,
        dense_ffn_total=layers * dense,
        compressed_ffn_total=layers * compressed,
        mha_equiv_total=layers * mha,
        reduction_frac_total=saved / denom)


def count_flops(d: int, d_ff: int, s: int, plan: CompressionPlan) -> dict:
    """Analytic multiply-add FLOP counts (2 FLOPs per MAC) for one forward.

    Activation cost is excluded. Quantized mode performs the same MACs as
    dense, so its ratio is 1; the savings there are memory, not FLOPs.
    """
    check_positive(d, "d")
    check_positive(d_ff, "d_ff")
    check_positive(s, "s")
    dense = 4 * s * d * d_ff
    k = floor_scaled(plan.keep_frac, d_ff)
    m = d_ff - k
    if plan.mode == "lowrank" and m > 0:
        r = tail_rank(d, m, plan.rank_frac)
        split = 4 * s * d * k + 4 * s * r * (d + m)
    else:
        split = dense
    return {"dense": dense, "split": split, "ratio": dense / split}


def count_stored_params(obj) -> float:
    """Stored parameter count of an actual layer/split object.

    Dense arrays count their elements; low-rank factors count both factor
    blocks; quantized matrices count rows*cols*bits/32 plus their scale
    and zero-point arrays. Matches the closed-form count_params
    convention.
    """
    def weight(w) -> float:
        if isinstance(w, QuantizedMatrix):
            return w.rows * w.cols * w.bits / 32.0 + w.scales.size + w.zeros.size
        if isinstance(w, LowRankFactors):
            return float(w.left.size + w.right.size)
        return float(np.asarray(w).size)

    if isinstance(obj, FfnLayer):
        return weight(obj.up) + weight(obj.down)
    if isinstance(obj, SplitFfn):
        total = weight(obj.heavy_up) + weight(obj.heavy_down)
        tail = obj.tail
        if isinstance(tail, DenseTail):
            total += weight(tail.up) + weight(tail.down)
        elif isinstance(tail, LowRankTail):
            total += weight(tail.up_factors) + weight(tail.down_factors)
        elif isinstance(tail, QuantizedTail):
            total += weight(tail.up_q) + weight(tail.down_q)
        return total
    raise ShapeError(f"cannot count parameters of {type(obj).__name__}")


@dataclass(frozen=True)
class TimingStats:
    median_ms: float
    iqr_ms: float
    repeats: int
    warmup: int


@dataclass(frozen=True)
class LatencyReport:
    config: dict
    baseline: TimingStats
    split: TimingStats
    speedup: float
    est_end_to_end_speedup: float  # estimate assuming FFN_LATENCY_SHARE of latency
    hardware: str
    threads: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _resolve_threads(threads) -> int:
    if threads is None:
        raw = os.environ.get("HH_SPLIT_THREADS", "1")
        try:
            threads = int(raw)
        except ValueError:
            raise RangeError(f"HH_SPLIT_THREADS must be an integer, got {raw!r}") from None
    return check_positive(threads, "threads")


def _forward_fn(model, quant_path: str):
    if isinstance(model, FfnLayer):
        return lambda x: ffn_forward(model, x)
    if isinstance(model, SplitFfn):
        return lambda x: split_forward(model, x, quant_path=quant_path)
    raise ShapeError(f"cannot benchmark object of type {type(model).__name__}")


def _time_forward(fn, x, repeats, warmup, timer, timer_resolution_ns) -> TimingStats:
    if repeats < 11:
        raise RangeError(f"need at least 11 timed repeats, got {repeats}")
    if warmup < 3:
        raise RangeError(f"need at least 3 warm-up runs, got {warmup}")
    for _ in range(warmup):
        fn(x)
    times = []
    for _ in range(repeats):
        t0 = timer()
        fn(x)
        times.append(timer() - t0)
    median_ns = statistics.median(times)
    if timer_resolution_ns is None:
        timer_resolution_ns = time.get_clock_info("perf_counter").resolution * 1e9
    if median_ns < 50 * timer_resolution_ns:
        raise MeasurementError(
            f"median {median_ns:.0f} ns is under 50 timer ticks "
            f"({timer_resolution_ns:.0f} ns each); increase the problem size")
    quartiles = statistics.quantiles(times, n=4, method="inclusive")
    return TimingStats(median_ms=median_ns / 1e6, iqr_ms=(quartiles[2] - quartiles[0]) / 1e6,
                       repeats=repeats, warmup=warmup)


def _bench_input(model_dim: int, batch: int, seq: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=seed))
    return rng.standard_normal((batch * seq, model_dim)).astype(np.float32)


def benchmark_forward(model, batch: int, seq: int, repeats: int, *, warmup: int = 3,
                      seed: int = 0, threads=None, quant_path: str = "fused",
                      timer=time.perf_counter_ns, timer_resolution_ns=None) -> TimingStats:
    """Median wall-clock time of one forward pass over a fixed random input."""
    check_positive(batch, "batch")
    check_positive(seq, "seq")
    threads = _resolve_threads(threads)
    x = _bench_input(model.model_dim, batch, seq, seed)
    fn = _forward_fn(model, quant_path)
    with threadpool_limits(limits=threads):
        return _time_forward(fn, x, repeats, warmup, timer, timer_resolution_ns)


def compare_latency(layer: FfnLayer, split: SplitFfn, batch: int, seq: int,
                    repeats: int = 11, *, warmup: int = 3, seed: int = 0,
                    hardware: str = "", threads=None, quant_path: str = "fused",
                    timer=time.perf_counter_ns, timer_resolution_ns=None) -> LatencyReport:
    """Time dense vs split forward on the same input and report the speedup."""
    check_positive(batch, "batch")
    check_positive(seq, "seq")
    if layer.model_dim != split.model_dim or layer.width != split.original_width:
        raise ShapeError("baseline layer and split have inconsistent shapes")
    threads = _resolve_threads(threads)
    x = _bench_input(layer.model_dim, batch, seq, seed)
    base_fn = _forward_fn(layer, quant_path)
    split_fn = _forward_fn(split, quant_path)
    with threadpool_limits(limits=threads):
        base = _time_forward(base_fn, x, repeats, warmup, timer, timer_resolution_ns)
        spl = _time_forward(split_fn, x, repeats, warmup, timer, timer_resolution_ns)
    speedup = base.median_ms / spl.median_ms
    est = 1.0 / ((1.0 - FFN_LATENCY_SHARE) + FFN_LATENCY_SHARE / speedup)
    config = {"d": layer.model_dim, "d_ff": layer.width, "batch": batch, "seq": seq,
              "repeats": repeats, "warmup": warmup, "seed": seed,
              "quant_path": quant_path, "mode": _tail_mode(split)}
    return LatencyReport(config=config, baseline=base, split=spl, speedup=speedup,
                         est_end_to_end_speedup=est, hardware=hardware, threads=threads)


def _tail_mode(split: SplitFfn) -> str:
    if isinstance(split.tail, LowRankTail):
        return "lowrank"
    if isinstance(split.tail, QuantizedTail):
        return "quant"
    return "dense"


@dataclass(frozen=True)
class BenchRecord:
    """One CSV/JSON report row: configuration plus measured results."""

    d: int
    d_ff: int
    batch: int
    seq: int
    mode: str
    keep_frac: float
    rank_frac: float
    hh_bits: int
    tail_bits: int
    group_size: int
    baseline_ms: float
    split_ms: float
    speedup: float
    params_dense: float
    params_split: float
    reduction_frac: float


def record_from_run(split: SplitFfn, report: LatencyReport) -> BenchRecord:
    """Flatten a latency report plus the split's actual storage into a row."""
    d = split.model_dim
    d_ff = split.original_width
    k = split.heavy_count
    mode = _tail_mode(split)
    rank_frac = 0.0
    hh_bits = tail_bits = 32
    group_size = 0
    tail = split.tail
    if isinstance(tail, LowRankTail):
        rank_frac = tail.up_factors.rank / min(d, tail.width)
    if isinstance(tail, QuantizedTail):
        tail_bits = tail.up_q.bits
        group_size = tail.up_q.group_size
    if isinstance(split.heavy_up, QuantizedMatrix):
        hh_bits = split.heavy_up.bits
        group_size = split.heavy_up.group_size
    params_dense = float(2 * d * d_ff)
    params_split = count_stored_params(split)
    reduction = (params_dense - params_split) / (4 * d * d + params_dense)
    return BenchRecord(
        d=d, d_ff=d_ff, batch=report.config["batch"], seq=report.config["seq"],
        mode=mode, keep_frac=k / d_ff, rank_frac=rank_frac, hh_bits=hh_bits,
        tail_bits=tail_bits, group_size=group_size,
        baseline_ms=report.baseline.median_ms, split_ms=report.split.median_ms,
        speedup=report.speedup, params_dense=params_dense,
        params_split=params_split, reduction_frac=reduction)


def emit_report(records, fmt: str = "csv") -> str:
    """Render records as CSV (fixed column order) or a versioned JSON doc."""
    records = list(records)
    if not records:
        raise RangeError("cannot emit an empty report")
    rows = [dataclasses.asdict(r) for r in records]
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in REPORT_COLUMNS])
        return out.getvalue()
    if fmt == "json":
        doc = {"version": 1,
               "records": [{c: row[c] for c in REPORT_COLUMNS} for row in rows]}
        return json.dumps(doc, indent=2)
    raise RangeError(f"unknown report format {fmt!r}")


def parse_report_json(text: str) -> list[BenchRecord]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"report is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise FormatError("unsupported report document")
    try:
        return [BenchRecord(**row) for row in doc["records"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed report row: {exc}") from None


def write_report(records, path, fmt: str = "csv") -> None:
    Path(path).write_text(emit_report(records, fmt), encoding="utf-8")
