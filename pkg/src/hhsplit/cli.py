"""Command-line pipeline driver.

Subcommands: gen-model, gen-calib, profile, split, compress, eval, bench,
params. Machine-readable results go to --out (or standard output) as
JSON; bench can emit CSV instead. Diagnostics go to standard error.

Exit codes: 0 success, 1 usage error, 2 data/format error,
3 numeric/measurement error.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys

from .bench import compare_latency, count_params, emit_report, record_from_run
from .checkpoint import gen_calibration, gen_synthetic_model, load_checkpoint, save_checkpoint
from .compress import CompressionPlan, compress_lowrank, compress_quant, eval_compression
from .errors import FormatError, HhsplitError, NumericError, UsageError
from .ffn import FfnLayer, SplitFfn, split_ffn
from .profiler import (
    NeuronStats,
    accumulate,
    importance,
    norm_distribution,
    select_heavy_hitters,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_shape_args(p, with_layers=False):
    p.add_argument("--d", type=int, required=True, help="model (hidden) dimension")
    p.add_argument("--dff", type=int, required=True, help="FFN width (number of neurons)")
    if with_layers:
        p.add_argument("--layers", type=int, default=12, help="number of FFN layers")


def _add_plan_args(p, include_mode=True):
    if include_mode:
        p.add_argument("--mode", choices=("lowrank", "quant"), default="lowrank",
                       help="compression mode")
    p.add_argument("--keep-frac", type=float, default=0.25,
                   help="fraction of neurons kept as heavy hitters")
    p.add_argument("--rank-frac", type=float, default=0.10,
                   help="tail rank as a fraction of its full rank")
    p.add_argument("--hh-bits", type=int, default=8,
                   help="bit width for heavy-hitter weights (quant mode)")
    p.add_argument("--tail-bits", type=int, default=3,
                   help="bit width for tail weights (quant mode)")
    p.add_argument("--group-size", type=int, default=128,
                   help="quantization group size along the reduction axis")


def _build_parser() -> _Parser:
    parser = _Parser(prog="hhsplit",
                     description="Heavy-hitter aware FFN splitting and compression")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_parser(name, **kw):
        # Show resolved defaults in --help so every knob's default is visible.
        return sub.add_parser(name, formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                              **kw)

    p = add_parser("gen-model", help="write a seeded synthetic FFN checkpoint")
    _add_shape_args(p)
    p.add_argument("--n-heavy", type=int, default=0, help="number of planted heavy hitters")
    p.add_argument("--heavy-scale", type=float, default=10.0,
                   help="scale applied to planted up-projection columns (> 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .hhckpt path")
    p.set_defaults(func=_cmd_gen_model)

    p = add_parser("gen-calib", help="write seeded Gaussian calibration batches")
    p.add_argument("--d", type=int, required=True, help="model (hidden) dimension")
    p.add_argument("--tokens", type=int, default=128, help="tokens per batch")
    p.add_argument("--batches", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .hhckpt path")
    p.set_defaults(func=_cmd_gen_calib)

    p = add_parser("profile", help="accumulate per-neuron stats over calibration data")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--layer-index", type=int, default=0)
    p.add_argument("--out", required=True, help="output stats JSON path")
    p.set_defaults(func=_cmd_profile)

    p = add_parser("split", help="split a layer along its heavy hitters")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--keep-frac", type=float, default=0.25)
    p.add_argument("--out", required=True, help="output .hhckpt path")
    p.set_defaults(func=_cmd_split)

    p = add_parser("compress", help="compress the tail of a dense split")
    p.add_argument("--split", required=True)
    _add_plan_args(p)
    p.add_argument("--out", required=True, help="output .hhckpt path")
    p.set_defaults(func=_cmd_compress)

    p = add_parser("eval", help="forward error of a compressed split vs the layer")
    p.add_argument("--model", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--quant-path", choices=("fused", "reference"), default="fused")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = add_parser("bench", help="dense vs split forward latency microbenchmark")
    p.add_argument("--model", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seq", type=int, default=128)
    p.add_argument("--repeats", type=int, default=11)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hardware", default="", help="hardware description for the report")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_bench)

    p = add_parser("params", help="closed-form parameter counts and reduction")
    _add_shape_args(p, with_layers=True)
    _add_plan_args(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_params)

    return parser


def _config(args, keys) -> dict:
    return {k: getattr(args, k.replace("-", "_")) for k in keys}


def _load_as(path, kind):
    obj = load_checkpoint(path)
    expected = {"layer": FfnLayer, "split": SplitFfn, "stats": NeuronStats, "calib": list}
    if not isinstance(obj, expected[kind]):
        raise FormatError(f"{path} holds {type(obj).__name__}, expected a {kind}")
    return obj


def _plan_from_args(args) -> CompressionPlan:
    return CompressionPlan(mode=args.mode, keep_frac=args.keep_frac,
                           rank_frac=args.rank_frac, hh_bits=args.hh_bits,
                           tail_bits=args.tail_bits, group_size=args.group_size)


def _cmd_gen_model(args):
    layer, planted = gen_synthetic_model(args.d, args.dff, args.n_heavy,
                                         args.heavy_scale, args.seed)
    save_checkpoint(layer, args.out)
    return {"command": "gen-model",
            "config": _config(args, ["d", "dff", "n_heavy", "heavy_scale", "seed", "out"]),
            "planted_indices": planted.tolist()}


def _cmd_gen_calib(args):
    batches = gen_calibration(args.tokens, args.d, args.batches, args.seed)
    save_checkpoint(batches, args.out)
    return {"command": "gen-calib",
            "config": _config(args, ["d", "tokens", "batches", "seed", "out"])}


def _cmd_profile(args):
    layer = _load_as(args.model, "layer")
    calib = _load_as(args.calib, "calib")
    stats = NeuronStats.for_layer(layer, args.layer_index)
    for batch in calib:
        accumulate(stats, layer, batch)
    save_checkpoint(stats, args.out)
    report = importance(stats)
    return {"command": "profile",
            "config": _config(args, ["model", "calib", "layer_index", "out"]),
            "tokens_seen": stats.tokens_seen,
            "d_ff": stats.width,
            "top_neurons": report.sorted_order[:32].tolist(),
            "sorted_scores": norm_distribution(report).tolist()}


def _cmd_split(args):
    layer = _load_as(args.model, "layer")
    stats = _load_as(args.stats, "stats")
    if stats.width != layer.width:
        raise FormatError(
            f"stats describe {stats.width} neurons but the model has {layer.width}")
    hh = select_heavy_hitters(importance(stats), args.keep_frac)
    split = split_ffn(layer, hh)
    save_checkpoint(split, args.out)
    return {"command": "split",
            "config": _config(args, ["model", "stats", "keep_frac", "out"]),
            "heavy_hitters": hh.indices.tolist(),
            "heavy_count": len(hh),
            "tail_width": split.tail.width}


def _cmd_compress(args):
    split = _load_as(args.split, "split")
    plan = _plan_from_args(args)
    if plan.mode == "lowrank":
        compressed = compress_lowrank(split, plan.rank_frac)
    else:
        compressed = compress_quant(split, plan)
    save_checkpoint(compressed, args.out)
    return {"command": "compress",
            "config": {"split": args.split, "out": args.out, **plan.to_dict()}}


def _cmd_eval(args):
    layer = _load_as(args.model, "layer")
    split = _load_as(args.split, "split")
    calib = _load_as(args.calib, "calib")
    result = eval_compression(layer, split, calib, quant_path=args.quant_path)
    return {"command": "eval",
            "config": _config(args, ["model", "split", "calib", "quant_path"]),
            "mse": result.mse,
            "rel_err": result.rel_err}


def _cmd_bench(args):
    layer = _load_as(args.model, "layer")
    split = _load_as(args.split, "split")
    hardware = args.hardware or f"{platform.machine()} {platform.processor()}".strip()
    report = compare_latency(layer, split, args.batch, args.seq, args.repeats,
                             seed=args.seed, hardware=hardware)
    record = record_from_run(split, report)
    if args.format == "csv":
        return emit_report([record], fmt="csv")
    return {"command": "bench",
            "config": {**report.config, "model": args.model, "split": args.split},
            "hardware": hardware,
            "threads": report.threads,
            "baseline_ms": report.baseline.median_ms,
            "baseline_iqr_ms": report.baseline.iqr_ms,
            "split_ms": report.split.median_ms,
            "split_iqr_ms": report.split.iqr_ms,
            "speedup": report.speedup,
            "est_end_to_end_speedup": report.est_end_to_end_speedup}


def _cmd_params(args):
    plan = _plan_from_args(args)
    report = count_params(args.d, args.dff, args.layers, plan)
    return {"command": "params",
            "config": _config(args, ["d", "dff", "layers"]),
            "reduction_frac": report.reduction_frac_total,
            **report.to_dict()}


def _emit(result, out_path) -> None:
    text = result if isinstance(result, str) else json.dumps(result, indent=2)
    if not text.endswith("\n"):
        text += "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        result = args.func(args)
        _emit(result, getattr(args, "out", None) if args.command in
              ("eval", "bench", "params") else None)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HhsplitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
