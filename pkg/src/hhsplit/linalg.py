"""Dense linear-algebra primitives: float32 storage, float64 accumulation.

Matrices are plain C-contiguous float32 numpy arrays. Products and norms
accumulate in float64 and store results back as float32, which keeps the
residual identities used elsewhere in the package tight. All operations
are pure; identical inputs yield bit-identical outputs on the same
platform with a fixed BLAS thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import NumericError, RangeError, ShapeError
from .validation import check_indices, check_matrix

_SQRT_HALF = np.float32(0.7071067811865476)
_TANH_COEFF = np.float32(0.7978845608028654)  # sqrt(2/pi)


@dataclass(frozen=True)
class LowRankFactors:
    """Rank-r factorization ``left @ right`` of an m-by-n matrix."""

    left: np.ndarray  # (m, r)
    right: np.ndarray  # (r, n)
    rank: int

    def __post_init__(self):
        object.__setattr__(self, "left", check_matrix(self.left, "left factor"))
        object.__setattr__(self, "right", check_matrix(self.right, "right factor"))
        m, r_left = self.left.shape
        r_right, n = self.right.shape
        if r_left != r_right or r_left != self.rank:
            raise ShapeError(
                f"inconsistent factor shapes {self.left.shape} x {self.right.shape} "
                f"for rank {self.rank}")
        if self.rank < 1 or self.rank > min(m, n):
            raise RangeError(f"rank {self.rank} invalid for a {m}x{n} matrix")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.left.shape[0], self.right.shape[1])

    def materialize(self) -> np.ndarray:
        """Dense reconstruction ``left @ right``."""
        return matmul(self.left, self.right)


def matmul(a, b) -> np.ndarray:
    """Matrix product, accumulated in float64, stored as float32."""
    a = check_matrix(a, "left operand")
    b = check_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    return out.astype(np.float32)


def gelu(x, approximate: bool = False) -> np.ndarray:
    """Elementwise GeLU, x * Phi(x) with Phi the standard normal CDF.

    The default uses the exact erf-based form. ``approximate=True`` selects
    the cheaper tanh variant; the two differ by up to ~1e-3 and everything
    in this package that asserts tolerances uses the exact form.
    """
    x = check_matrix(x, "x")
    if approximate:
        inner = _TANH_COEFF * (x + np.float32(0.044715) * x * x * x)
        return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))
    return np.float32(0.5) * x * (np.float32(1.0) + erf(x * _SQRT_HALF))


def frobenius_norm_sq(x) -> float:
    """Sum of squared entries, accumulated in float64."""
    x = check_matrix(x, "x")
    v = x.astype(np.float64).ravel()
    return float(v @ v)


def truncated_svd(a, rank: int) -> LowRankFactors:
    """Best rank-r approximation factors of ``a``.

    Returns ``(U_r * sigma_r, V_r^T)`` so that ``left @ right`` is the best
    Frobenius-norm approximation of rank ``rank``; the squared
    reconstruction error equals the sum of the squared discarded singular
    values (up to float32 storage rounding).
    """
    a = check_matrix(a, "a")
    if not 1 <= rank <= min(a.shape):
        raise RangeError(f"rank must be in [1, {min(a.shape)}] for shape {a.shape}, got {rank}")
    try:
        u, s, vt = np.linalg.svd(a.astype(np.float64), full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular value decomposition did not converge: {exc}") from None
    left = (u[:, :rank] * s[:rank]).astype(np.float32)
    right = vt[:rank].astype(np.float32)
    return LowRankFactors(left=left, right=right, rank=rank)


def select_columns(a, idx) -> np.ndarray:
    """Gather columns of ``a`` in the order given by ``idx``."""
    a = check_matrix(a, "a")
    idx = check_indices(idx, a.shape[1], "column indices")
    return np.ascontiguousarray(a[:, idx])


def select_rows(a, idx) -> np.ndarray:
    """Gather rows of ``a`` in the order given by ``idx``."""
    a = check_matrix(a, "a")
    idx = check_indices(idx, a.shape[0], "row indices")
    return np.ascontiguousarray(a[idx, :])
