"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, data/format
errors exit 2, numeric/measurement errors exit 3.
"""


class HhsplitError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(HhsplitError, ValueError):
    """Operands have incompatible or invalid dimensions."""


class RangeError(HhsplitError, ValueError):
    """A scalar argument (rank, fraction, bit-width, ...) is out of range."""


class BadIndexError(HhsplitError, IndexError):
    """An index list contains duplicate or out-of-range entries."""


class FormatError(HhsplitError, ValueError):
    """A serialized file or packed buffer is malformed."""


class NumericError(HhsplitError, ArithmeticError):
    """A numeric routine failed to converge or produced invalid values."""


class MeasurementError(NumericError):
    """A latency measurement cannot be trusted (e.g. timer resolution)."""


class EmptyCalibrationError(HhsplitError, ValueError):
    """An operation that needs calibration data received none."""


class NothingToCompressError(HhsplitError, ValueError):
    """The requested compression has no target (e.g. an empty tail)."""


class DegenerateAblationError(HhsplitError, ValueError):
    """The requested ablation would remove zero neurons."""


class UsageError(HhsplitError):
    """Bad command-line usage."""
