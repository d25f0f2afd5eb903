"""Heavy-hitter aware splitting and asymmetric compression of FFN layers."""

from .bench import (
    BenchRecord,
    LatencyReport,
    ParamReport,
    TimingStats,
    benchmark_forward,
    compare_latency,
    count_flops,
    count_params,
    count_stored_params,
    emit_report,
    parse_report_json,
    record_from_run,
    write_report,
)
from .checkpoint import (
    gen_calibration,
    gen_synthetic_model,
    load_checkpoint,
    save_checkpoint,
)
from .compress import (
    CompressionPlan,
    EvalResult,
    compress_lowrank,
    compress_quant,
    eval_compression,
    tail_rank,
)
from .errors import (
    BadIndexError,
    DegenerateAblationError,
    EmptyCalibrationError,
    FormatError,
    HhsplitError,
    MeasurementError,
    NothingToCompressError,
    NumericError,
    RangeError,
    ShapeError,
    UsageError,
)
from .estimator import FfnCompressor, HeavyHitterProfiler
from .ffn import (
    Activation,
    DenseTail,
    FfnLayer,
    HeavyHitterSet,
    LowRankTail,
    QuantizedTail,
    SplitFfn,
    ffn_forward,
    ffn_forward_rank_one_sum,
    ffn_hidden,
    remove_neurons,
    split_ffn,
    split_forward,
)
from .linalg import (
    LowRankFactors,
    frobenius_norm_sq,
    gelu,
    matmul,
    select_columns,
    select_rows,
    truncated_svd,
)
from .profiler import (
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
from .quant import QuantizedMatrix, dequantize, matmul_quantized, quantize_matrix

__version__ = "0.1.0"
