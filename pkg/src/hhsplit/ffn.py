"""Feed-forward layer model: dense forward, rank-one view, heavy-hitter split.

A "neuron" is one column of the up-projection paired with the matching row
of the down-projection; the layer output is the sum of the neurons'
rank-one contributions. A split layer evaluates the heavy-hitter neurons
and the remaining tail separately and adds the two partial outputs. The
tail may be dense, factorized into low-rank pairs, or quantized.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import BadIndexError, ShapeError
from .linalg import LowRankFactors, gelu, matmul, select_columns, select_rows
from .quant import QuantizedMatrix, matmul_quantized
from .validation import check_indices, check_matrix


class Activation(enum.Enum):
    GELU = "gelu"


def _activate(hidden: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.GELU:
        return gelu(hidden)
    raise ValueError(f"unsupported activation {activation!r}")


@dataclass(frozen=True)
class FfnLayer:
    """Two-layer feed-forward block ``act(x @ up) @ down`` (no biases)."""

    up: np.ndarray  # (model_dim, width)
    down: np.ndarray  # (width, model_dim)
    activation: Activation = Activation.GELU

    def __post_init__(self):
        object.__setattr__(self, "up", check_matrix(self.up, "up projection"))
        object.__setattr__(self, "down", check_matrix(self.down, "down projection"))
        if self.up.shape[1] != self.down.shape[0] or self.up.shape[0] != self.down.shape[1]:
            raise ShapeError(
                f"up {self.up.shape} and down {self.down.shape} do not form an FFN pair")

    @property
    def model_dim(self) -> int:
        return self.up.shape[0]

    @property
    def width(self) -> int:
        return self.up.shape[1]


@dataclass(frozen=True)
class HeavyHitterSet:
    """Sorted, duplicate-free neuron indices selected as heavy hitters."""

    layer_index: int
    indices: np.ndarray

    def __post_init__(self):
        idx = np.sort(np.asarray(self.indices, dtype=np.int64).ravel())
        if idx.size:
            if idx[0] < 0:
                raise BadIndexError("negative neuron index in heavy-hitter set")
            if np.any(idx[1:] == idx[:-1]):
                raise BadIndexError("duplicate neuron index in heavy-hitter set")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)


def _logical_shape(w) -> tuple[int, int]:
    # Quantized weights are stored transposed (out, in); report the dense
    # orientation they stand in for.
    if isinstance(w, QuantizedMatrix):
        return (w.cols, w.rows)
    return w.shape


@dataclass(frozen=True)
class DenseTail:
    up: np.ndarray  # (model_dim, tail_width)
    down: np.ndarray  # (tail_width, model_dim)

    def __post_init__(self):
        object.__setattr__(self, "up", check_matrix(self.up, "tail up"))
        object.__setattr__(self, "down", check_matrix(self.down, "tail down"))
        if self.up.shape[1] != self.down.shape[0] or self.up.shape[0] != self.down.shape[1]:
            raise ShapeError(
                f"tail up {self.up.shape} and down {self.down.shape} are inconsistent")

    @property
    def width(self) -> int:
        return self.up.shape[1]


@dataclass(frozen=True)
class LowRankTail:
    up_factors: LowRankFactors  # factorization of the (model_dim, tail_width) up block
    down_factors: LowRankFactors  # factorization of the (tail_width, model_dim) down block

    def __post_init__(self):
        (d, m) = self.up_factors.shape
        (m2, d2) = self.down_factors.shape
        if m != m2 or d != d2:
            raise ShapeError(
                f"factorized tail shapes {self.up_factors.shape} and "
                f"{self.down_factors.shape} are inconsistent")

    @property
    def width(self) -> int:
        return self.up_factors.shape[1]


@dataclass(frozen=True)
class QuantizedTail:
    up_q: QuantizedMatrix  # stored (tail_width, model_dim), transpose of the up block
    down_q: QuantizedMatrix  # stored (model_dim, tail_width), transpose of the down block

    def __post_init__(self):
        if self.up_q.rows != self.down_q.cols or self.up_q.cols != self.down_q.rows:
            raise ShapeError(
                f"quantized tail shapes {self.up_q.shape} and "
                f"{self.down_q.shape} are inconsistent")

    @property
    def width(self) -> int:
        return self.up_q.rows


TailForm = DenseTail | LowRankTail | QuantizedTail


@dataclass(frozen=True)
class SplitFfn:
    """Heavy-hitter/tail decomposition of an FfnLayer.

    ``heavy_up``/``heavy_down`` hold the selected neurons; quantized
    weights are stored transposed, one output neuron per row, so their
    quantization groups run along the reduction axis of the product.
    """

    heavy_up: np.ndarray | QuantizedMatrix  # (model_dim, k) dense / (k, model_dim) quantized
    heavy_down: np.ndarray | QuantizedMatrix  # (k, model_dim) dense / (model_dim, k) quantized
    tail: TailForm
    heavy_hitters: HeavyHitterSet
    original_width: int
    activation: Activation = Activation.GELU

    def __post_init__(self):
        if isinstance(self.heavy_up, np.ndarray):
            object.__setattr__(self, "heavy_up", check_matrix(self.heavy_up, "heavy up"))
        if isinstance(self.heavy_down, np.ndarray):
            object.__setattr__(self, "heavy_down", check_matrix(self.heavy_down, "heavy down"))
        d, k = _logical_shape(self.heavy_up)
        k2, d2 = _logical_shape(self.heavy_down)
        if k != k2 or d != d2:
            raise ShapeError(f"heavy up/down shapes are inconsistent ({d}x{k} vs {k2}x{d2})")
        if k != len(self.heavy_hitters):
            raise ShapeError(
                f"{k} heavy columns but {len(self.heavy_hitters)} heavy-hitter indices")
        if k + self.tail.width != self.original_width:
            raise ShapeError(
                f"{k} heavy + {self.tail.width} tail neurons != original width "
                f"{self.original_width}")
        if self.heavy_hitters.indices.size and \
                int(self.heavy_hitters.indices[-1]) >= self.original_width:
            raise BadIndexError("heavy-hitter index beyond original width")

    @property
    def model_dim(self) -> int:
        return _logical_shape(self.heavy_up)[0]

    @property
    def heavy_count(self) -> int:
        return len(self.heavy_hitters)


def _linear(x: np.ndarray, w, quant_path: str) -> np.ndarray:
    """x @ w for dense w; x @ dequant(w).T for transposed quantized w."""
    if isinstance(w, QuantizedMatrix):
        return matmul_quantized(x, w, path=quant_path)
    return matmul(x, w)


def ffn_forward(layer: FfnLayer, x) -> np.ndarray:
    """Dense forward pass ``act(x @ up) @ down``."""
    x = check_matrix(x, "x")
    if x.shape[1] != layer.model_dim:
        raise ShapeError(f"input width {x.shape[1]} != model dim {layer.model_dim}")
    hidden = _activate(matmul(x, layer.up), layer.activation)
    return matmul(hidden, layer.down)


def ffn_hidden(layer: FfnLayer, x) -> np.ndarray:
    """Activation block ``act(x @ up)``: one column per neuron."""
    x = check_matrix(x, "x")
    if x.shape[1] != layer.model_dim:
        raise ShapeError(f"input width {x.shape[1]} != model dim {layer.model_dim}")
    return _activate(matmul(x, layer.up), layer.activation)


def ffn_forward_rank_one_sum(layer: FfnLayer, x) -> np.ndarray:
    """Forward pass accumulated neuron-by-neuron as rank-one updates.

    Slow reference path: mathematically identical to ffn_forward and used
    as the oracle in split-equivalence checks.
    """
    x = check_matrix(x, "x")
    if x.shape[1] != layer.model_dim:
        raise ShapeError(f"input width {x.shape[1]} != model dim {layer.model_dim}")
    acc = np.zeros((x.shape[0], layer.model_dim), np.float64)
    for j in range(layer.width):
        hidden = _activate(matmul(x, layer.up[:, j:j + 1]), layer.activation)
        acc += hidden.astype(np.float64) @ layer.down[j:j + 1].astype(np.float64)
    return acc.astype(np.float32)


def split_ffn(layer: FfnLayer, hh: HeavyHitterSet) -> SplitFfn:
    """Split ``layer`` into heavy-hitter and tail sub-FFNs (dense tail).

    Heavy columns/rows are gathered in ascending index order, the tail
    keeps the complement in ascending order; no weight changes value.
    """
    idx = check_indices(hh.indices, layer.width, "heavy-hitter indices")
    complement = np.setdiff1d(np.arange(layer.width, dtype=np.int64), idx)
    return SplitFfn(
        heavy_up=select_columns(layer.up, idx),
        heavy_down=select_rows(layer.down, idx),
        tail=DenseTail(
            up=select_columns(layer.up, complement),
            down=select_rows(layer.down, complement)),
        heavy_hitters=hh,
        original_width=layer.width,
        activation=layer.activation)


def split_forward(split: SplitFfn, x, quant_path: str = "fused") -> np.ndarray:
    """Forward pass of a split layer: heavy part plus tail part.

    The tail is evaluated according to its form: dense like a normal FFN;
    low-rank factor-by-factor without materializing the tail weights;
    quantized via the fused dequantizing product (``quant_path="fused"``)
    or the dequantize-then-dense reference (``quant_path="reference"``).
    """
    x = check_matrix(x, "x")
    if x.shape[1] != split.model_dim:
        raise ShapeError(f"input width {x.shape[1]} != model dim {split.model_dim}")
    act = split.activation
    heavy_hidden = _activate(_linear(x, split.heavy_up, quant_path), act)
    out = _linear(heavy_hidden, split.heavy_down, quant_path)
    tail = split.tail
    if tail.width == 0:
        return out
    if isinstance(tail, DenseTail):
        tail_out = matmul(_activate(matmul(x, tail.up), act), tail.down)
    elif isinstance(tail, LowRankTail):
        hidden = _activate(
            matmul(matmul(x, tail.up_factors.left), tail.up_factors.right), act)
        tail_out = matmul(matmul(hidden, tail.down_factors.left), tail.down_factors.right)
    else:
        tail_hidden = _activate(_linear(x, tail.up_q, quant_path), act)
        tail_out = _linear(tail_hidden, tail.down_q, quant_path)
    return out + tail_out


def remove_neurons(layer: FfnLayer, idx) -> FfnLayer:
    """Layer with the given neurons deleted (up columns and down rows)."""
    idx = check_indices(idx, layer.width, "neuron indices")
    keep = np.setdiff1d(np.arange(layer.width, dtype=np.int64), idx)
    return FfnLayer(
        up=select_columns(layer.up, keep),
        down=select_rows(layer.down, keep),
        activation=layer.activation)
