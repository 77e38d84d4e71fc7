"""Small dense-matrix and distribution kernels."""

from __future__ import annotations

import numpy as np
from scipy import special

from .errors import DomainError, InvalidMatrixError

DEFAULT_EIG_FLOOR = 1e-6
_SYM_TOL = 1e-12


def check_symmetric(m: np.ndarray, tol: float = _SYM_TOL) -> np.ndarray:
    """Return ``m`` as a float array after checking it is square, finite, symmetric.

    The symmetry tolerance is relative to the largest absolute entry, so large
    matrices assembled from sums are not rejected over rounding.
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidMatrixError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidMatrixError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > tol * scale:
        raise InvalidMatrixError("matrix is not symmetric")
    return a


def symmetrize(m: np.ndarray) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    return 0.5 * (a + a.T)


def sym_inv_sqrt(m: np.ndarray, floor: float = DEFAULT_EIG_FLOOR) -> np.ndarray:
    """Inverse square root of a symmetric matrix with an eigenvalue floor.

    Each eigenvalue ``lam`` is mapped to ``1 / sqrt(max(lam, floor))``, so the
    result is symmetric positive definite even for singular or indefinite
    input.

    Parameters
    ----------
    m : array_like, shape (d, d)
        Symmetric matrix with finite entries.
    floor : float
        Strictly positive lower bound applied to the eigenvalues.

    Returns
    -------
    numpy.ndarray, shape (d, d)
    """
    if not floor > 0:
        raise DomainError(f"eigenvalue floor must be positive, got {floor}")
    a = check_symmetric(m)
    lam, q = np.linalg.eigh(symmetrize(a))
    inv = 1.0 / np.sqrt(np.maximum(lam, floor))
    w = (q * inv) @ q.T
    return symmetrize(w)


def op_norm(m: np.ndarray) -> float:
    """Spectral norm (largest singular value)."""
    a = np.asarray(m, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, 2))


def chi2_quantile(dof: int, p: float) -> float:
    """Quantile of the chi-square distribution with ``dof`` degrees of freedom.

    Inverts the regularized lower incomplete gamma function ``P(dof/2, q/2)``.
    """
    if int(dof) != dof or dof < 1:
        raise DomainError(f"degrees of freedom must be a positive integer, got {dof}")
    if not (0.0 <= p < 1.0):
        raise DomainError(f"probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return 0.0
    return float(2.0 * special.gammaincinv(0.5 * dof, p))


def chi2_cdf(dof: int, q: float) -> float:
    if q <= 0:
        return 0.0
    return float(special.gammainc(0.5 * dof, 0.5 * q))


def normal_quantile(p: float) -> float:
    """Standard normal quantile via the inverse error function."""
    if not (0.0 < p < 1.0):
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    # ndtri is the inverse of the normal CDF built on erf; symmetric to rounding
    if p > 0.5:
        return -float(special.ndtri(1.0 - p))
    return float(special.ndtri(p))


def normal_cdf(x):
    return special.ndtr(x)
