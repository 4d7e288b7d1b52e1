"""Dense linear-algebra kernels: truncated SVD, QR orthonormalization,
minimum-norm least squares, subspace distance, and singular-value
soft-thresholding.

All functions are pure and operate on plain float64 ndarrays. Outputs of
SVD/QR factorizations are sign-canonicalized so repeated runs (and tests)
see identical matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Orthonormality accepted when ||Q^T Q - I||_F is below this.
ORTHONORMALITY_TOL = 1e-10
# Relative singular-value cutoff for pseudo-inverse solves.
PINV_CUTOFF = 1e-10
# Relative singular-value floor below which a matrix counts as rank deficient.
RANK_TOL = 1e-12


class DimensionError(ValueError):
    """Shapes are incompatible with the requested operation."""


class DegenerateMatrixError(ValueError):
    """Input is rank deficient beyond what the operation tolerates."""

    def __init__(self, message: str, singular_value: float | None = None):
        super().__init__(message)
        self.singular_value = singular_value


class OrthonormalityError(ValueError):
    """A matrix expected to have orthonormal columns does not."""


def require_finite(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return m


def is_orthonormal(b: np.ndarray, tol: float = ORTHONORMALITY_TOL) -> bool:
    b = np.asarray(b, dtype=float)
    gram = b.T @ b
    return float(np.linalg.norm(gram - np.eye(b.shape[1]), "fro")) <= tol


def check_basis(b: np.ndarray, name: str = "basis") -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if not is_orthonormal(b):
        raise OrthonormalityError(f"{name} does not have orthonormal columns")
    return b


@dataclass(frozen=True)
class SvdResult:
    """Rank-r factorization U diag(s) V^T with U, V^T sign-canonicalized."""

    left: np.ndarray            # (m, r), orthonormal columns
    singular_values: np.ndarray  # (r,), nonnegative, descending
    right: np.ndarray           # (r, n), rows of V^T

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singular_values) @ self.right


def _sign_canonicalize(u: np.ndarray, vt: np.ndarray | None = None):
    """Flip signs so the largest-magnitude entry of each column of u is positive."""
    leaders = np.argmax(np.abs(u), axis=0)
    flips = np.sign(u[leaders, np.arange(u.shape[1])])
    flips[flips == 0] = 1.0
    if vt is None:
        return u * flips
    return u * flips, vt * flips[:, None]


def top_r_svd(m: np.ndarray, r: int) -> SvdResult:
    """Dominant-r singular triplets of a dense matrix.

    Deterministic up to the degenerate-spectrum case: each left singular
    vector has its largest-magnitude entry made positive, with the matching
    right singular vector flipped accordingly.
    """
    m = require_finite(m)
    if r < 1 or r > min(m.shape):
        raise DimensionError(
            f"rank request r={r} outside [1, {min(m.shape)}] for shape {m.shape}"
        )
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    u, vt = _sign_canonicalize(u[:, :r], vt[:r])
    return SvdResult(left=u, singular_values=s[:r].copy(), right=vt)


def qr_orthonormalize(m: np.ndarray) -> np.ndarray:
    """Orthonormal basis Q with span(Q) = span(m) and positive R diagonal.

    Raises DegenerateMatrixError (carrying the offending singular value)
    when the input is numerically rank deficient.
    """
    m = require_finite(m)
    s = np.linalg.svd(m, compute_uv=False)
    if s[-1] <= RANK_TOL * s[0]:
        raise DegenerateMatrixError(
            f"rank-deficient input to QR: smallest singular value {s[-1]:.3e} "
            f"(largest {s[0]:.3e})",
            singular_value=float(s[-1]),
        )
    q, rr = np.linalg.qr(m)
    flips = np.sign(np.diag(rr))
    flips[flips == 0] = 1.0
    return q * flips


def least_squares(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Minimum-norm arg-min of ||y - a w||_2 via pseudo-inverse.

    Singular values below PINV_CUTOFF * sigma_max(a) are treated as zero,
    so degenerate systems resolve to the minimum-norm solution instead of
    erroring.
    """
    a = require_finite(a, "design matrix")
    y = require_finite(np.asarray(y, dtype=float).ravel(), "targets")
    if a.ndim != 2 or a.shape[0] < a.shape[1]:
        raise DimensionError(f"design matrix must be tall, got shape {a.shape}")
    if a.shape[0] != y.shape[0]:
        raise DimensionError(f"{a.shape[0]} rows vs {y.shape[0]} targets")
    w, *_ = np.linalg.lstsq(a, y, rcond=PINV_CUTOFF)
    return w


def subspace_distance(b1: np.ndarray, b2: np.ndarray) -> float:
    """Frobenius norm of b2 projected off span(b1); in [0, sqrt(r2)]."""
    b1 = check_basis(b1, "b1")
    b2 = check_basis(b2, "b2")
    if b1.shape[0] != b2.shape[0]:
        raise DimensionError(f"row dimensions differ: {b1.shape[0]} vs {b2.shape[0]}")
    residual = b2 - b1 @ (b1.T @ b2)
    return float(np.linalg.norm(residual, "fro"))


def svd_soft_threshold(m: np.ndarray, lam: float) -> np.ndarray:
    """Shrink every singular value by lam (floored at zero) and reconstruct."""
    if lam < 0:
        raise ValueError(f"threshold must be nonnegative, got {lam}")
    m = require_finite(m)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return (u * np.maximum(s - lam, 0.0)) @ vt
