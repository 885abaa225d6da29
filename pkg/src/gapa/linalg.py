"""Dense matrix helpers with a numerically robust Cholesky path.

Matrices are plain float64 ``numpy`` arrays in row-major order.  The public
constructors reject NaN/Inf so that everything downstream can assume finite
values.  ``cholesky`` symmetrizes its input and walks a growing jitter
schedule because RBF Gram matrices built on tightly clustered activations are
routinely on the edge of positive definiteness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import solve_triangular

from .errors import NotPositiveDefiniteError, ShapeError

__all__ = [
    "CholeskyFactor",
    "as_matrix",
    "cholesky",
    "cholesky_solve",
    "default_jitter_schedule",
    "matmul",
]

#: Tolerance (relative to 1 + max|A|) for the symmetry pre-check.
SYMMETRY_TOL = 1e-8


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> NDArray[np.float64]:
    """Validate and return a 2-D float64 matrix.

    Rejects non-finite entries and, when ``rows``/``cols`` are given, any
    shape mismatch.
    """
    a = np.asarray(values, dtype=float)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if rows is not None and a.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {a.shape[0]}")
    if cols is not None and a.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got {a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise ShapeError("matrix contains NaN or Inf entries")
    return a


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor of ``A + jitter_used * I``."""

    lower: NDArray[np.float64]
    jitter_used: float

    def __post_init__(self) -> None:
        lower = as_matrix(self.lower)
        if lower.shape[0] != lower.shape[1]:
            raise ShapeError("Cholesky factor must be square")
        if np.any(np.diag(lower) <= 0.0):
            raise NotPositiveDefiniteError("factor diagonal must be strictly positive")

    @property
    def n(self) -> int:
        return self.lower.shape[0]


def matmul(a, b) -> NDArray[np.float64]:
    """Standard matrix product with explicit shape checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise ShapeError("matrix product overflowed to non-finite values")
    return out


def default_jitter_schedule(a: NDArray[np.float64]) -> tuple[float, ...]:
    """Jitter levels 0, 1e-10*tr(A)/n, 1e-8*tr(A)/n, 1e-6*tr(A)/n."""
    scale = float(np.trace(a)) / a.shape[0]
    return (0.0, 1e-10 * scale, 1e-8 * scale, 1e-6 * scale)


def cholesky(a, jitter_schedule: Sequence[float] | None = None) -> CholeskyFactor:
    """Factor a symmetric positive-definite matrix, adding jitter if needed.

    The input is symmetrized as ``(A + A^T) / 2`` first; asymmetry beyond
    ``SYMMETRY_TOL`` (relative to ``1 + max|A|``) is rejected.  The smallest
    jitter from the schedule for which the factorization succeeds is recorded
    on the returned factor.

    Raises
    ------
    NotPositiveDefiniteError
        If the factorization fails at every jitter level.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"cholesky requires a square matrix, got {a.shape}")
    scale = 1.0 + float(np.max(np.abs(a))) if a.size else 1.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_TOL * scale:
        raise ShapeError(f"matrix is not symmetric: max|A - A^T| = {asym:.3e}")
    sym = (a + a.T) / 2.0
    schedule = default_jitter_schedule(sym) if jitter_schedule is None else tuple(jitter_schedule)
    eye = np.eye(sym.shape[0])
    for jitter in schedule:
        try:
            lower = np.linalg.cholesky(sym + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        return CholeskyFactor(lower=lower, jitter_used=float(jitter))
    raise NotPositiveDefiniteError(
        f"factorization failed at every jitter level {tuple(schedule)}"
    )


def cholesky_solve(factor: CholeskyFactor, b) -> NDArray[np.float64]:
    """Solve ``(A + jitter * I) X = b`` by forward/back substitution."""
    b = np.asarray(b, dtype=float)
    rhs = b[:, None] if b.ndim == 1 else b
    if rhs.ndim != 2 or rhs.shape[0] != factor.n:
        raise ShapeError(f"right-hand side rows {rhs.shape} do not match factor size {factor.n}")
    if not np.all(np.isfinite(rhs)):
        raise ShapeError("right-hand side contains NaN or Inf entries")
    y = solve_triangular(factor.lower, rhs, lower=True)
    x = solve_triangular(factor.lower.T, y, lower=False)
    return x[:, 0] if b.ndim == 1 else x
