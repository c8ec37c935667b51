"""Structured covariance ``Sigma_i = U_i Lambda Lambda^T U_i^T + I``.

``gamma`` packs the lower triangle of the ``R x R`` factor ``Lambda``
row by row: ``(L11, L21, L22, L31, L32, L33, ...)``.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

#: clusters larger than this use rank-R Cholesky updates of the identity
DENSE_CHOLESKY_MAX = 50


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


def n_gamma(R: int) -> int:
    return R * (R + 1) // 2


def lower_indices(R: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column index of each packed ``gamma`` entry."""
    rows, cols = [], []
    for i in range(R):
        for j in range(i + 1):
            rows.append(i)
            cols.append(j)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def diag_positions(R: int) -> np.ndarray:
    """Positions in ``gamma`` that hold diagonal entries of ``Lambda``."""
    return np.array([i * (i + 1) // 2 + i for i in range(R)], dtype=int)


def dim_from_gamma(M: int) -> int:
    R = int(round((np.sqrt(8 * M + 1) - 1) / 2))
    if n_gamma(R) != M:
        raise ValueError(f"{M} variance parameters do not fill a lower triangle")
    return R


def build_lambda(gamma, R: int, strict: bool = True) -> np.ndarray:
    """Unpack ``gamma`` into the lower-triangular factor ``Lambda``.

    With ``strict`` (the default) negative diagonal entries raise; the
    optimiser evaluates the likelihood at slightly infeasible points and
    passes ``strict=False``.
    """
    gamma = np.asarray(gamma, dtype=float).ravel()
    if gamma.size != n_gamma(R):
        raise ValueError(f"R={R} needs {n_gamma(R)} variance parameters, got {gamma.size}")
    if strict and np.any(gamma[diag_positions(R)] < 0):
        raise ValueError("diagonal of Lambda must be non-negative")
    lam = np.zeros((R, R))
    lam[lower_indices(R)] = gamma
    return lam


def sigma_i(lam: np.ndarray, U: np.ndarray) -> np.ndarray:
    V = np.asarray(U, dtype=float) @ lam
    return V @ V.T + np.eye(V.shape[0])


def _cholesky_rank_update(V: np.ndarray) -> np.ndarray:
    """Cholesky factor of ``I + V V^T`` via successive rank-1 updates."""
    n = V.shape[0]
    L = np.eye(n)
    for r in range(V.shape[1]):
        x = V[:, r].copy()
        for k in range(n):
            lkk = L[k, k]
            rad = np.hypot(lkk, x[k])
            c = rad / lkk
            s = x[k] / lkk
            L[k, k] = rad
            if k + 1 < n:
                L[k + 1 :, k] = (L[k + 1 :, k] + s * x[k + 1 :]) / c
                x[k + 1 :] = c * x[k + 1 :] - s * L[k + 1 :, k]
    return L


def cholesky_i(sigma: np.ndarray, factor: np.ndarray | None = None) -> np.ndarray:
    """Lower Cholesky factor of ``sigma``.

    Args:
        sigma: symmetric positive definite ``N x N`` matrix.
        factor: optional ``N x R`` matrix ``V`` with ``sigma = V V^T + I``.
            When given and ``N`` exceeds :data:`DENSE_CHOLESKY_MAX`, the
            factor is built by rank-1 updates of the identity (``O(R N^2)``).
    """
    sigma = np.asarray(sigma, dtype=float)
    if factor is not None and sigma.shape[0] > DENSE_CHOLESKY_MAX:
        return _cholesky_rank_update(np.asarray(factor, dtype=float))
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"covariance is not positive definite: {exc}") from None


def logdet_from_cholesky(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def mahalanobis_from_cholesky(L: np.ndarray, z: np.ndarray) -> float:
    """``z^T Sigma^-1 z`` by one triangular solve."""
    u = solve_triangular(L, z, lower=True)
    return float(u @ u)


def reduction_factors(lam: np.ndarray, U: np.ndarray, standardize: bool = True):
    """Factors of the unit-cube integrand for one cluster.

    Returns ``(V, d)``.  Standardised: ``V = D^-1/2 U Lambda`` and ``d`` the
    diagonal of ``D^-1`` with ``D = diag(Sigma)``, so that ``V V^T + diag(d)``
    is the correlation matrix of the latent vector.  Unstandardised:
    ``V = U Lambda`` and ``d = 1``.
    """
    V = np.asarray(U, dtype=float) @ lam
    if not standardize:
        return V, np.ones(V.shape[0])
    diag = 1.0 + np.sum(V * V, axis=1)
    return V / np.sqrt(diag)[:, None], 1.0 / diag


def marginal_variance(lam: np.ndarray, u) -> np.ndarray:
    """``u^T Lambda Lambda^T u + 1`` for one or many rows ``u``."""
    v = np.atleast_2d(np.asarray(u, dtype=float)) @ lam
    out = 1.0 + np.sum(v * v, axis=1)
    return out if np.ndim(u) > 1 else out[0]
