"""Linear matrix factor baseline: alpha-PCA with alpha = 0."""

import numpy as np

from ..model import FactorParams, MatrixSeries


def _top_eigvecs(S: np.ndarray, k: int) -> np.ndarray:
    vals, vecs = np.linalg.eigh((S + S.T) / 2.0)
    order = np.argsort(-vals, kind="stable")[:k]
    return vecs[:, order]


def _flip(M: np.ndarray) -> np.ndarray:
    signs = np.ones(M.shape[1])
    for a in range(M.shape[1]):
        big = np.flatnonzero(np.abs(M[:, a]) > 1e-10)
        if big.size and M[big[0], a] < 0:
            signs[a] = -1.0
    return signs


def alpha_pca_fit(X, k1: int, k2: int) -> FactorParams:
    """Loadings from the leading eigenvectors of the row/column second-moment matrices.

    Families are ignored; missing cells (if any) count as zeros.
    """
    if isinstance(X, MatrixSeries):
        Y = np.where(X.observed, X.values, 0.0)
    else:
        Y = np.asarray(X, dtype=float)
    T, p1, p2 = Y.shape
    denom = T * p1 * p2
    M1 = np.einsum("tij,tkj->ik", Y, Y) / denom
    M2 = np.einsum("tij,tik->jk", Y, Y) / denom
    R = np.sqrt(p1) * _top_eigvecs(M1, k1)
    C = np.sqrt(p2) * _top_eigvecs(M2, k2)
    R = R * _flip(R)
    C = C * _flip(C)
    F = np.matmul(np.matmul(R.T, Y), C) / (p1 * p2)
    return FactorParams(R, C, F)
