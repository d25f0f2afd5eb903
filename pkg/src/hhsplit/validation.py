"""Input validation helpers, in the spirit of sklearn's check_array."""

from __future__ import annotations

import math

import numpy as np

from .errors import BadIndexError, RangeError, ShapeError


def check_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float32 2-D array with finite entries."""
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    arr = np.ascontiguousarray(arr)
    if arr.size and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or Inf entries")
    return arr


def check_indices(idx, bound: int, name: str = "indices") -> np.ndarray:
    """Validate a 1-D list of unique integer indices in [0, bound)."""
    arr = np.asarray(idx)
    if arr.size == 0:
        return np.empty(0, dtype=np.int64)
    if arr.ndim != 1:
        raise BadIndexError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise BadIndexError(f"{name} must be integers, got dtype {arr.dtype}")
    arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() >= bound:
        raise BadIndexError(f"{name} out of range [0, {bound}): {arr.min()}..{arr.max()}")
    if np.unique(arr).size != arr.size:
        raise BadIndexError(f"{name} contains duplicates")
    return arr


def check_fraction(value: float, name: str = "fraction") -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise RangeError(f"{name} must be in [0, 1], got {value}")
    return value


def check_bits(bits: int, name: str = "bits") -> int:
    bits = int(bits)
    if not 2 <= bits <= 8:
        raise RangeError(f"{name} must be in 2..8, got {bits}")
    return bits


def check_positive(value: int, name: str) -> int:
    value = int(value)
    if value < 1:
        raise RangeError(f"{name} must be >= 1, got {value}")
    return value


def floor_scaled(frac: float, n: int) -> int:
    """floor(frac * n), guarded against float representation error.

    The small epsilon only corrects cases like 0.1 * 30 = 2.999...96 that
    would otherwise floor one step below the exact rational value.
    """
    return int(math.floor(frac * n + 1e-9))
