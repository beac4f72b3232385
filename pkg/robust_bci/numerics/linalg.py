"""Symmetric eigendecomposition by cyclic Jacobi rotations and the PSD inverse square root"""
from __future__ import annotations

import logging
from typing import Optional, Tuple

import numpy as np

from robust_bci.config import settings
from robust_bci.errors import DimensionError, NotSymmetricError, NumericError, ValidationError
from robust_bci.numerics.tensor import Tensor

logger = logging.getLogger(__name__)

SYMMETRY_TOLERANCE = 1e-6


def _as_square(m) -> np.ndarray:
    array = m.data if isinstance(m, Tensor) else np.asarray(m)
    array = array.astype(np.float64)
    if array.ndim != 2 or array.shape[0] != array.shape[1]:
        raise DimensionError(f"Expected a square matrix, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValidationError("Matrix contains non-finite values")
    return array


def _check_symmetric(a: np.ndarray) -> None:
    scale = max(np.abs(a).max(initial=0.0), np.finfo(np.float64).tiny)
    asymmetry = np.abs(a - a.T).max(initial=0.0)
    if asymmetry > SYMMETRY_TOLERANCE * scale:
        raise NotSymmetricError(f"Matrix is not symmetric (max |m - m^T| = {asymmetry:.3e})")


def _off_diagonal_norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(a * a) - np.sum(np.diag(a) ** 2)))


def jacobi_eigh(a: np.ndarray, max_sweeps: Optional[int] = None,
                tolerance: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray, int]:
    """Cyclic Jacobi on a float64 symmetric matrix.

    Returns (eigenvalues ascending, eigenvectors as columns, sweeps used). Each
    eigenvector's largest-magnitude component is made positive.
    """
    max_sweeps = settings.EIGEN_MAX_SWEEPS if max_sweeps is None else max_sweeps
    tolerance = settings.EIGEN_TOLERANCE if tolerance is None else tolerance

    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    threshold = tolerance * np.linalg.norm(a)

    sweeps = 0
    while _off_diagonal_norm(a) > threshold:
        if sweeps >= max_sweeps:
            raise NumericError(
                f"Jacobi eigensolver did not converge in {max_sweeps} sweeps "
                f"(off-diagonal norm {_off_diagonal_norm(a):.3e})"
            )
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c

                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
        sweeps += 1

    eigenvalues = np.diag(a).copy()
    order = np.argsort(eigenvalues, kind="stable")
    eigenvalues, v = eigenvalues[order], v[:, order]
    pivots = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[pivots, np.arange(n)] < 0, -1.0, 1.0)
    return eigenvalues, v * signs, sweeps


def sym_eig(m) -> Tuple[Tensor, Tensor]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix."""
    a = _as_square(m)
    _check_symmetric(a)
    eigenvalues, vectors, sweeps = jacobi_eigh(a)
    logger.debug(f"Jacobi converged after {sweeps} sweeps for a {a.shape[0]}x{a.shape[0]} matrix")
    dtype = m.dtype if isinstance(m, Tensor) else np.float64
    return Tensor.wrap(eigenvalues.astype(dtype)), Tensor.wrap(vectors.astype(dtype))


def inv_sqrt_psd_report(m) -> Tuple[Tensor, int]:
    """``m^{-1/2}`` in float64 plus the number of eigenvalues raised to the floor.

    Eigenvalues below ``EIGEN_FLOOR_RATIO * max(eigenvalue)`` are clamped to that
    floor so rank-deficient covariances stay finite.
    """
    a = _as_square(m)
    _check_symmetric(a)
    eigenvalues, vectors, _ = jacobi_eigh(a)
    top = eigenvalues.max(initial=0.0)
    if top <= 0.0:
        raise ValidationError("Matrix has no positive eigenvalue; cannot form an inverse square root")
    floor = settings.EIGEN_FLOOR_RATIO * top
    n_clamped = int(np.count_nonzero(eigenvalues < floor))
    clamped = np.maximum(eigenvalues, floor)
    w = (vectors * (1.0 / np.sqrt(clamped))) @ vectors.T
    w = 0.5 * (w + w.T)
    return Tensor.wrap(w), n_clamped


def inv_sqrt_psd(m) -> Tensor:
    w, n_clamped = inv_sqrt_psd_report(m)
    if n_clamped:
        logger.warning(f"Clamped {n_clamped} eigenvalue(s) to the floor while inverting a "
                       f"{w.shape[0]}x{w.shape[0]} covariance")
    return w
