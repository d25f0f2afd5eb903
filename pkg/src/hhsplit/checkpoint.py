"""Bit-exact checkpoint container and seeded synthetic generators.

File layout (extension ``.hhckpt``): one JSON header line terminated by
``\\n``, then a raw payload. The header is

    {"version": 1, "dtype": "f32", "tensors": [...], "meta": {...}}

Dense tensor entries are ``{"name", "rows", "cols", "byte_offset"}``; the
payload holds rows*cols little-endian float32 values, row-major.
Quantized entries additionally carry ``{"dtype": "q<bits>g<group>",
"bits", "group_size"}``; their payload is the packed code bytes (each row
padded to a byte boundary), then per-group scales, then per-group
zero-points, both little-endian float32. Byte offsets are relative to the
end of the header line and sections tile the payload contiguously.

Neuron statistics are stored as a standalone JSON document instead
(see profiler.stats_to_json); load_checkpoint recognizes both.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import FormatError, RangeError
from .ffn import (
    Activation,
    DenseTail,
    FfnLayer,
    HeavyHitterSet,
    LowRankTail,
    QuantizedTail,
    SplitFfn,
)
from .linalg import LowRankFactors
from .profiler import NeuronStats, stats_from_json, stats_to_json
from .quant import QuantizedMatrix

CHECKPOINT_VERSION = 1
FILE_DTYPE = "f32"


def _dense_entry(name: str, arr: np.ndarray, offset: int) -> tuple[dict, bytes]:
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    entry = {"name": name, "rows": int(arr.shape[0]), "cols": int(arr.shape[1]),
             "byte_offset": offset}
    return entry, data


def _quant_entry(name: str, q: QuantizedMatrix, offset: int) -> tuple[dict, bytes]:
    data = (q.packed.tobytes()
            + q.scales.astype("<f4").tobytes()
            + q.zeros.astype("<f4").tobytes())
    entry = {"name": name, "rows": q.rows, "cols": q.cols, "byte_offset": offset,
             "dtype": f"q{q.bits}g{q.group_size}", "bits": q.bits,
             "group_size": q.group_size}
    return entry, data


class _Writer:
    def __init__(self):
        self.entries: list[dict] = []
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, name: str, tensor) -> None:
        if isinstance(tensor, QuantizedMatrix):
            entry, data = _quant_entry(name, tensor, self.offset)
        else:
            entry, data = _dense_entry(name, tensor, self.offset)
        self.entries.append(entry)
        self.chunks.append(data)
        self.offset += len(data)

    def write(self, path, meta: dict) -> None:
        header = {"version": CHECKPOINT_VERSION, "dtype": FILE_DTYPE,
                  "tensors": self.entries, "meta": meta}
        blob = json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"
        Path(path).write_bytes(blob + b"".join(self.chunks))


def _tail_kind(tail) -> str:
    if isinstance(tail, DenseTail):
        return "dense"
    if isinstance(tail, LowRankTail):
        return "lowrank"
    if isinstance(tail, QuantizedTail):
        return "quant"
    raise FormatError(f"unknown tail form {type(tail).__name__}")


def save_checkpoint(obj, path) -> None:
    """Serialize a layer, split, calibration batch list, or NeuronStats.

    load_checkpoint(save_checkpoint(x)) reproduces x bit-exactly,
    including packed quantized payloads.
    """
    if isinstance(obj, NeuronStats):
        Path(path).write_text(stats_to_json(obj), encoding="utf-8")
        return
    w = _Writer()
    if isinstance(obj, FfnLayer):
        w.add("ffn.0.U", obj.up)
        w.add("ffn.0.V", obj.down)
        w.write(path, {"kind": "layer", "activation": obj.activation.value})
    elif isinstance(obj, SplitFfn):
        w.add("split.hh.U", obj.heavy_up)
        w.add("split.hh.V", obj.heavy_down)
        kind = _tail_kind(obj.tail)
        meta = {"kind": "split",
                "layer_index": int(obj.heavy_hitters.layer_index),
                "original_width": int(obj.original_width),
                "activation": obj.activation.value,
                "tail": kind,
                "hh_indices": [int(i) for i in obj.heavy_hitters.indices]}
        if kind == "dense":
            w.add("split.tail.U", obj.tail.up)
            w.add("split.tail.V", obj.tail.down)
        elif kind == "lowrank":
            meta["tail_rank"] = int(obj.tail.up_factors.rank)
            w.add("split.tail.U.left", obj.tail.up_factors.left)
            w.add("split.tail.U.right", obj.tail.up_factors.right)
            w.add("split.tail.V.left", obj.tail.down_factors.left)
            w.add("split.tail.V.right", obj.tail.down_factors.right)
        else:
            w.add("split.tail.U", obj.tail.up_q)
            w.add("split.tail.V", obj.tail.down_q)
        w.write(path, meta)
    elif isinstance(obj, (list, tuple)):
        for i, batch in enumerate(obj):
            w.add(f"calib.{i}", batch)
        w.write(path, {"kind": "calib", "batches": len(obj)})
    else:
        raise FormatError(f"cannot serialize object of type {type(obj).__name__}")


def _entry_nbytes(entry: dict) -> int:
    rows, cols = entry["rows"], entry["cols"]
    if "dtype" in entry and str(entry["dtype"]).startswith("q"):
        bits, gs = int(entry["bits"]), int(entry["group_size"])
        if entry["dtype"] != f"q{bits}g{gs}":
            raise FormatError(
                f"tensor {entry['name']!r}: dtype tag {entry['dtype']!r} does not "
                f"match bits={bits} group_size={gs}")
        row_bytes = (cols * bits + 7) // 8
        n_groups = (cols + gs - 1) // gs
        return rows * row_bytes + 2 * rows * n_groups * 4
    return rows * cols * 4


def _parse_tensor(entry: dict, payload: bytes):
    rows, cols, off = entry["rows"], entry["cols"], entry["byte_offset"]
    if "dtype" in entry and str(entry["dtype"]).startswith("q"):
        bits, gs = int(entry["bits"]), int(entry["group_size"])
        row_bytes = (cols * bits + 7) // 8
        n_groups = (cols + gs - 1) // gs
        packed = np.frombuffer(payload, dtype=np.uint8, count=rows * row_bytes,
                               offset=off).reshape(rows, row_bytes).copy()
        off += rows * row_bytes
        scales = np.frombuffer(payload, dtype="<f4", count=rows * n_groups,
                               offset=off).reshape(rows, n_groups).astype(np.float32)
        off += rows * n_groups * 4
        zeros = np.frombuffer(payload, dtype="<f4", count=rows * n_groups,
                              offset=off).reshape(rows, n_groups).astype(np.float32)
        return QuantizedMatrix(rows=rows, cols=cols, bits=bits, group_size=gs,
                               packed=packed, scales=scales, zeros=zeros)
    arr = np.frombuffer(payload, dtype="<f4", count=rows * cols,
                        offset=off).reshape(rows, cols)
    return arr.astype(np.float32)


def _validate_header(header: dict, payload: bytes) -> list[dict]:
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')!r}")
    if header.get("dtype") != FILE_DTYPE:
        raise FormatError(f"unsupported checkpoint dtype {header.get('dtype')!r}")
    entries = header.get("tensors")
    if not isinstance(entries, list):
        raise FormatError("checkpoint header has no tensor table")
    names = [e.get("name") for e in entries]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names in checkpoint header")
    running = 0
    for entry in entries:
        try:
            rows, cols, off = int(entry["rows"]), int(entry["cols"]), int(entry["byte_offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed tensor entry {entry!r}: {exc}") from None
        if rows < 0 or cols < 0:
            raise FormatError(f"tensor {entry['name']!r} has negative shape")
        if off != running:
            raise FormatError(
                f"tensor {entry['name']!r} at byte offset {off}, expected {running} "
                f"(sections must tile the payload without overlap)")
        running += _entry_nbytes(entry)
    if len(payload) != running:
        raise FormatError(
            f"payload has {len(payload)} bytes, header describes {running}")
    return entries


def load_checkpoint(path):
    """Load whatever save_checkpoint wrote; bit-exact inverse."""
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    header = None
    if newline >= 0:
        try:
            header = json.loads(data[:newline].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            header = None
    if not isinstance(header, dict) or "tensors" not in header:
        # Not a binary checkpoint; try the standalone stats JSON document.
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: not a checkpoint or stats document") from None
        return stats_from_json(text)
    payload = data[newline + 1:]
    entries = _validate_header(header, payload)
    tensors = {e["name"]: _parse_tensor(e, payload) for e in entries}
    meta = header.get("meta") or {}
    kind = meta.get("kind")
    try:
        if kind == "layer":
            return FfnLayer(up=tensors["ffn.0.U"], down=tensors["ffn.0.V"],
                            activation=Activation(meta.get("activation", "gelu")))
        if kind == "calib":
            return [tensors[f"calib.{i}"] for i in range(int(meta.get("batches", 0)))]
        if kind == "split":
            tail_kind = meta.get("tail")
            if tail_kind == "dense":
                tail = DenseTail(up=tensors["split.tail.U"], down=tensors["split.tail.V"])
            elif tail_kind == "lowrank":
                rank = int(meta["tail_rank"])
                tail = LowRankTail(
                    up_factors=LowRankFactors(
                        left=tensors["split.tail.U.left"],
                        right=tensors["split.tail.U.right"], rank=rank),
                    down_factors=LowRankFactors(
                        left=tensors["split.tail.V.left"],
                        right=tensors["split.tail.V.right"], rank=rank))
            elif tail_kind == "quant":
                tail = QuantizedTail(up_q=tensors["split.tail.U"],
                                     down_q=tensors["split.tail.V"])
            else:
                raise FormatError(f"unknown tail kind {tail_kind!r}")
            hh = HeavyHitterSet(layer_index=int(meta.get("layer_index", 0)),
                                indices=np.asarray(meta["hh_indices"], dtype=np.int64))
            return SplitFfn(
                heavy_up=tensors["split.hh.U"], heavy_down=tensors["split.hh.V"],
                tail=tail, heavy_hitters=hh,
                original_width=int(meta["original_width"]),
                activation=Activation(meta.get("activation", "gelu")))
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing tensor or meta field {exc}") from None
    raise FormatError(f"unknown checkpoint kind {kind!r}")


def gen_synthetic_model(d: int, d_ff: int, n_heavy: int, heavy_scale: float,
                        seed: int) -> tuple[FfnLayer, np.ndarray]:
    """Seeded Gaussian FFN layer with ``n_heavy`` planted heavy hitters.

    Weights are i.i.d. normal with standard deviation 1/sqrt(d). Planted
    up-projection columns are scaled by ``heavy_scale`` and the matching
    down-projection rows by sqrt(heavy_scale), so the planted neurons
    dominate both activation norm and output contribution. Returns the
    layer and the sorted planted indices.

    Uses the Philox counter-based generator: identical arguments give
    bit-identical weights on every platform (reference vectors are pinned
    in the test suite and README).
    """
    if d < 1 or d_ff < 1:
        raise RangeError(f"dimensions must be positive, got d={d}, d_ff={d_ff}")
    if not 0 <= n_heavy <= d_ff:
        raise RangeError(f"n_heavy must be in [0, {d_ff}], got {n_heavy}")
    if not heavy_scale > 1.0:
        raise RangeError(f"heavy_scale must be > 1, got {heavy_scale}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    std = 1.0 / math.sqrt(d)
    up = rng.standard_normal((d, d_ff)) * std
    down = rng.standard_normal((d_ff, d)) * std
    planted = np.sort(rng.choice(d_ff, size=n_heavy, replace=False).astype(np.int64))
    up[:, planted] *= heavy_scale
    down[planted, :] *= math.sqrt(heavy_scale)
    layer = FfnLayer(up=up.astype(np.float32), down=down.astype(np.float32))
    return layer, planted


def gen_calibration(s_tokens: int, d: int, batches: int, seed: int) -> list[np.ndarray]:
    """Seeded standard-normal calibration batches, each (s_tokens, d)."""
    if s_tokens < 1 or d < 1:
        raise RangeError(f"batch shape must be positive, got {s_tokens}x{d}")
    if batches < 0:
        raise RangeError(f"batches must be >= 0, got {batches}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    return [rng.standard_normal((s_tokens, d)).astype(np.float32) for _ in range(batches)]
