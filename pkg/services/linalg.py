"""Dense matrix arithmetic, least squares and spectral norms."""

import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg as sla

from exceptions import ArgumentError, DataError, ShapeError


logger = logging.getLogger(__name__)


# Constants
CONDITION_LIMIT = 1e8
SPECTRAL_TOL = 1e-10
SPECTRAL_MAX_ITER = 1000
SPECTRAL_START_SEED = 0


class LstsqSolution(BaseModel):
    """
    Result of a (ridge) least-squares solve.

    Attributes:
        coefficients: Solution matrix of shape (design cols, target cols)
        residual_norm: Frobenius norm of design @ coefficients - targets
        rank: Numerical rank of the design matrix
        condition_estimate: Ratio of largest to smallest singular value
        rank_deficient: rank < design cols; the minimum-norm solution was returned
        ill_conditioned: condition_estimate exceeded CONDITION_LIMIT
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    coefficients: np.ndarray
    residual_norm: float = Field(ge=0.0)
    rank: int = Field(ge=0)
    condition_estimate: float = Field(ge=0.0)
    rank_deficient: bool = False
    ill_conditioned: bool = False


def as_matrix(a, name: str = 'matrix') -> np.ndarray:
    """
    Validate and convert to a finite 2-D float64 array.

    Raises:
        ShapeError: if the input is not two-dimensional
        DataError: if any entry is NaN or infinite
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    """
    Matrix product with shape checking.

    Raises:
        ShapeError: if a.cols != b.rows
    """
    a = as_matrix(a, 'left operand')
    b = as_matrix(b, 'right operand')
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def least_squares(design, targets, ridge: float = 0.0) -> LstsqSolution:
    """
    Minimize ||design @ C - targets||_F^2 + ridge * ||C||_F^2 over C.

    Solved through a thin SVD, so the normal matrix is never inverted. With
    ridge = 0 small singular values are truncated and the minimum-norm
    (Moore-Penrose) solution is returned; rank deficiency and ill
    conditioning are flagged on the result and logged.

    Args:
        design: (m, n) design matrix
        targets: (m, k) targets, or a length-m vector
        ridge: Nonnegative Tikhonov weight

    Returns:
        LstsqSolution with an (n, k) coefficient matrix
    """
    if ridge < 0 or not np.isfinite(ridge):
        raise ArgumentError(f"ridge must be a finite nonnegative number, got {ridge}")

    design = as_matrix(design, 'design')
    targets_arr = np.asarray(targets, dtype=np.float64)
    if targets_arr.ndim == 1:
        targets_arr = targets_arr[:, None]
    targets_arr = as_matrix(targets_arr, 'targets')

    m, n = design.shape
    if targets_arr.shape[0] != m:
        raise ShapeError(
            f"design has {m} rows but targets have {targets_arr.shape[0]}"
        )

    if m == 0 or n == 0:
        raise ShapeError(f"design must be nonempty, got shape {design.shape}")

    u, s, vt = sla.svd(design, full_matrices=False, lapack_driver='gesdd')
    tol = s[0] * max(m, n) * np.finfo(np.float64).eps if s.size else 0.0
    keep = s > tol
    rank = int(np.count_nonzero(keep))

    if rank == 0:
        condition = float('inf') if s.size and s[0] > 0 else 0.0
    else:
        condition = float(s[0] / s[-1]) if s[-1] > 0 else float('inf')

    if ridge > 0:
        factors = s / (s * s + ridge)
    else:
        factors = np.zeros_like(s)
        factors[keep] = 1.0 / s[keep]

    coefficients = vt.T @ (factors[:, None] * (u.T @ targets_arr))
    residual_norm = float(np.linalg.norm(design @ coefficients - targets_arr))

    rank_deficient = rank < n
    ill_conditioned = condition > CONDITION_LIMIT
    if ridge == 0 and (rank_deficient or ill_conditioned):
        logger.warning(
            f"Least squares on {m}x{n} design: rank {rank}, condition "
            f"{condition:.3e}; returning minimum-norm solution"
        )

    return LstsqSolution(
        coefficients=coefficients,
        residual_norm=residual_norm,
        rank=rank,
        condition_estimate=condition,
        rank_deficient=rank_deficient,
        ill_conditioned=ill_conditioned,
    )


def spectral_norm(a, tol: float = SPECTRAL_TOL, max_iter: int = SPECTRAL_MAX_ITER) -> float:
    """
    Largest singular value by power iteration on a^T a.

    Args:
        a: Nonempty matrix (a vector is treated as a single row)
        tol: Relative change at which the iteration stops
        max_iter: Iteration cap

    Returns:
        The spectral norm estimate (>= 0)
    """
    if tol <= 0:
        raise ArgumentError(f"tol must be positive, got {tol}")
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    a = as_matrix(arr, 'matrix')
    if a.size == 0:
        raise ShapeError("spectral norm of an empty matrix")

    if not np.any(a):
        return 0.0

    # fixed start vector keeps the estimate deterministic
    v = np.random.default_rng(SPECTRAL_START_SEED).standard_normal(a.shape[1])
    v /= np.linalg.norm(v)

    sigma = 0.0
    for _ in range(max_iter):
        av = a @ v
        w = a.T @ av
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            # start vector fell in the null space of a
            return float(np.linalg.norm(av))
        v = w / norm_w
        new_sigma = float(np.sqrt(norm_w))
        if abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            break
        sigma = new_sigma

    # both estimates are lower bounds of the top singular value
    return max(sigma, float(np.linalg.norm(a @ v)))
