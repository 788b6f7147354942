import numpy as np

RANK_TOL = 1e-10


def _basis(A: np.ndarray) -> np.ndarray:
    U, s, _ = np.linalg.svd(np.asarray(A, dtype=float), full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise ValueError("ccor needs a matrix of positive rank")
    r = int(np.sum(s > RANK_TOL * s[0]))
    return U[:, :r]


def ccor(A: np.ndarray, B: np.ndarray) -> float:
    """Smallest nonzero canonical correlation between the column spaces of ``A`` and ``B``.

    1 means the spaces coincide (for the smaller rank), 0 that some direction
    of the smaller space is orthogonal to the other.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float).T).T
    B = np.atleast_2d(np.asarray(B, dtype=float).T).T
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"row counts differ: {A.shape[0]} vs {B.shape[0]}")
    Qa, Qb = _basis(A), _basis(B)
    s = np.linalg.svd(Qa.T @ Qb, compute_uv=False)
    r = min(Qa.shape[1], Qb.shape[1])
    return float(np.clip(s[r - 1], 0.0, 1.0))
