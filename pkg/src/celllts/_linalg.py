"""Batched Cholesky solves via explicit triangular substitution.

LAPACK's LU solver picks pivots by comparing magnitudes, so rescaling one
column of the data can change the elimination order and perturb results in
the last bits. Cholesky factorization and triangular substitution involve no
pivoting: every intermediate scales exactly with the data, which keeps the
fitting pipeline bitwise equivariant under power-of-two column rescaling.
"""

from __future__ import annotations

import numpy as np


def tri_solve_lower(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve L Y = B by forward substitution; L (..., p, p) lower triangular,
    B (..., p, r)."""
    p = L.shape[-1]
    Y = np.empty_like(B)
    for i in range(p):
        acc = np.einsum("...k,...kr->...r", L[..., i, :i], Y[..., :i, :])
        Y[..., i, :] = (B[..., i, :] - acc) / L[..., i, i][..., None]
    return Y


def tri_solve_lower_t(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve L^T X = B by backward substitution."""
    p = L.shape[-1]
    X = np.empty_like(B)
    for i in range(p - 1, -1, -1):
        acc = np.einsum("...k,...kr->...r", L[..., i + 1:, i], X[..., i + 1:, :])
        X[..., i, :] = (B[..., i, :] - acc) / L[..., i, i][..., None]
    return X


def chol_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve (L L^T) X = B given the lower Cholesky factor."""
    return tri_solve_lower_t(L, tri_solve_lower(L, B))


def spd_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve the SPD system A X = B via Cholesky (no pivoting)."""
    return chol_solve(np.linalg.cholesky(A), B)
