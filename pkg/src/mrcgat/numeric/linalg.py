"""Symmetric positive-definite solves through Cholesky factors."""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from mrcgat.errors import NotSPDError, ShapeError

SYMMETRY_TOL = 1e-10


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix, raising NotSPDError otherwise."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise NotSPDError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError("non-positive pivot during Cholesky factorization") from exc


def spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive-definite ``a``.

    ``b`` may be a vector or a matrix; the result has the same shape.
    """
    b = np.asarray(b, dtype=np.float64)
    low = cholesky(a)
    if b.shape[0] != low.shape[0]:
        raise ShapeError(f"cannot solve {low.shape} system with right-hand side {b.shape}")
    y = solve_triangular(low, b, lower=True)
    return solve_triangular(low.T, y, lower=False)


def whiten(z: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Rows of ``z`` mapped by ``L^{-1}`` where ``cov = L L^T``.

    Squared Euclidean distances between whitened rows are the quadratic
    forms ``(z_i - z_j)^T cov^{-1} (z_i - z_j)``.
    """
    low = cholesky(cov)
    return solve_triangular(low, np.asarray(z, dtype=np.float64).T, lower=True).T
