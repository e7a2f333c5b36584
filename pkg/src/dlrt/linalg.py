"""Dense float64 kernels: QR, thin SVD, norms, and basic products.

Every factorization here carries an explicit result contract (orthonormal
factors, sign conventions, dimension checks) so the integrator steps built
on top are deterministic for identical input on the same build.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

__all__ = [
    "LinalgError",
    "DimensionError",
    "NumericError",
    "Matrix",
    "QrResult",
    "SvdResult",
    "as_matrix",
    "householder_qr",
    "ortho_augment",
    "svd_thin",
    "frobenius_norm",
    "matmul",
    "transpose",
    "axpy",
]

# Dense real matrix carrier: 2-D C-contiguous float64 ndarray.
Matrix = np.ndarray


class LinalgError(Exception):
    """Base class for numeric-kernel failures."""


class DimensionError(LinalgError):
    """Operand shapes violate the operation's contract."""


class NumericError(LinalgError):
    """Non-finite values or a factorization that failed to converge."""


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Coerce input to a C-contiguous float64 2-D array with finite entries.

    Raises
    ------
    DimensionError
        If the input is not 2-D.
    NumericError
        If any entry is NaN or infinite.
    """
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={out.ndim}")
    if not np.isfinite(out).all():
        raise NumericError(f"{name} contains non-finite entries")
    return out


class QrResult(NamedTuple):
    q: Matrix  # (m, k), orthonormal columns
    r: Matrix  # (k, k), upper triangular, diagonal >= 0


class SvdResult(NamedTuple):
    p: Matrix        # (n, q), orthonormal columns
    sigma: np.ndarray  # (q,), descending, >= 0
    qmat: Matrix     # (q, q), orthogonal


def _signed_qr(a: Matrix) -> tuple[Matrix, Matrix]:
    """Reduced QR with every diagonal entry of R flipped to be >= 0."""
    q, r = np.linalg.qr(a, mode="reduced")
    signs = np.where(np.diagonal(r) < 0.0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


def householder_qr(a) -> QrResult:
    """Reduced QR factorization a = q @ r with a fixed sign convention.

    Householder reflections (LAPACK geqrf under the hood) followed by a
    column sign flip so that every diagonal entry of ``r`` is non-negative.
    The flip pins down the otherwise arbitrary sign freedom, making the
    factors deterministic for identical input.

    Parameters
    ----------
    a : array_like, shape (m, k) with m >= k

    Returns
    -------
    QrResult
        ``q`` (m, k) with orthonormal columns and ``r`` (k, k) upper
        triangular with diag(r) >= 0, satisfying a = q @ r.
    """
    a = as_matrix(a, "a")
    m, k = a.shape
    if m < k:
        raise DimensionError(f"householder_qr needs rows >= cols, got {m}x{k}")
    q, r = _signed_qr(a)
    return QrResult(q, r)


def ortho_augment(u0, k1, drop_tol: float = 1e-12) -> Matrix:
    """Orthonormal basis for the joint column span of ``u0`` and ``k1``.

    Computes the reduced QR of the concatenation [u0 | k1].  Trailing
    columns whose R diagonal falls below ``drop_tol`` times the largest
    diagonal are numerically dependent on earlier columns and are dropped,
    so the returned basis may have fewer columns than the concatenation.
    At least one column is always kept.
    """
    u0 = as_matrix(u0, "u0")
    k1 = as_matrix(k1, "k1")
    if u0.shape[0] != k1.shape[0]:
        raise DimensionError(
            f"row counts differ: {u0.shape[0]} vs {k1.shape[0]}"
        )
    stacked = np.hstack([u0, k1])
    q, r = _signed_qr(stacked)
    diag = np.abs(np.diagonal(r))
    lead = diag.max()
    keep = diag.size
    while keep > 1 and diag[keep - 1] <= drop_tol * lead:
        keep -= 1
    return np.ascontiguousarray(q[:, :keep])


def svd_thin(l) -> SvdResult:
    """Thin SVD l = p @ diag(sigma) @ qmat.T of a tall matrix.

    Parameters
    ----------
    l : array_like, shape (n, q) with n >= q

    Returns
    -------
    SvdResult
        ``p`` (n, q) orthonormal columns, ``sigma`` (q,) descending and
        non-negative, ``qmat`` (q, q) orthogonal.
    """
    l = as_matrix(l, "l")
    n, q = l.shape
    if n < q:
        raise DimensionError(f"svd_thin needs rows >= cols, got {n}x{q}")
    try:
        p, sigma, qt = np.linalg.svd(l, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed to converge: {exc}") from exc
    return SvdResult(p, sigma, np.ascontiguousarray(qt.T))


def frobenius_norm(a) -> float:
    """Frobenius norm of a 2-D array."""
    return float(np.linalg.norm(as_matrix(a, "a")))


def matmul(a, b) -> Matrix:
    """Matrix product with an explicit inner-dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return a @ b


def transpose(a) -> Matrix:
    """Transpose returned as a fresh C-contiguous array."""
    return np.ascontiguousarray(as_matrix(a, "a").T)


def axpy(alpha: float, x, y) -> Matrix:
    """alpha * x + y for same-shape matrices."""
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape != y.shape:
        raise DimensionError(f"axpy shapes differ: {x.shape} vs {y.shape}")
    return alpha * x + y
