"""Rotation into the identified parameterisation.

After normalisation ``R'R/p1 = I``, ``C'C/p2 = I``, the factor second-moment
matrices ``sum_t F_t F_t'/T`` and ``sum_t F_t'F_t/T`` are diagonal with
descending entries, and the first non-negligible entry of every loading
column is positive.  The natural parameters ``R F_t C'`` are unchanged.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .model import FactorParams

__all__ = ["IdentifiabilityError", "RotationTieWarning", "ConstraintResidual", "normalize", "constraint_residuals", "sign_align"]

RANK_TOL = 1e-10
SIGN_TOL = 1e-10
TIE_TOL = 1e-12


class IdentifiabilityError(ValueError):
    pass


class RotationTieWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ConstraintResidual:
    r_orth: float
    c_orth: float
    f_row_diag: float
    f_col_diag: float
    sign_ok_R: tuple[bool, ...]
    sign_ok_C: tuple[bool, ...]

    def max_residual(self) -> float:
        return max(self.r_orth, self.c_orth, self.f_row_diag, self.f_col_diag)

    def satisfied(self, tol: float = 1e-10) -> bool:
        return self.max_residual() <= tol and all(self.sign_ok_R) and all(self.sign_ok_C)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sign_ok_R"] = list(self.sign_ok_R)
        d["sign_ok_C"] = list(self.sign_ok_C)
        d["max_residual"] = self.max_residual()
        return d


def _first_sign(col: np.ndarray) -> float:
    big = np.flatnonzero(np.abs(col) > SIGN_TOL)
    if big.size == 0:
        return 1.0
    return 1.0 if col[big[0]] > 0 else -1.0


def _split(M: np.ndarray, name: str):
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[-1] <= RANK_TOL * max(1.0, s[0]):
        raise IdentifiabilityError(f"{name} is not of full column rank (smallest singular value {s[-1] if s.size else 0:.3g})")
    return U, s[:, None] * Vt


def _eig_desc(S: np.ndarray, name: str, notes: list | None):
    vals, vecs = np.linalg.eigh((S + S.T) / 2.0)
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    if vals.size > 1 and np.any(np.abs(np.diff(vals)) <= TIE_TOL * max(1.0, abs(vals[0]))):
        msg = f"eigenvalues of {name} are tied; rotation is not unique"
        if notes is None:
            warnings.warn(msg, RotationTieWarning, stacklevel=3)
        else:
            notes.append(msg)
    return vecs


def normalize(theta: FactorParams, notes: list | None = None) -> FactorParams:
    """Rotate ``theta`` so that the identification constraints hold.

    Raises :class:`IdentifiabilityError` if ``R`` or ``C`` is rank deficient.
    Eigenvalue ties are reported through ``notes`` when given, otherwise as a
    :class:`RotationTieWarning`.
    """
    p1, p2, T = theta.dims
    U_R, Q_R = _split(theta.R, "R")
    U_C, Q_C = _split(theta.C, "C")
    M = np.matmul(np.matmul(Q_R, theta.F), Q_C.T)  # (T, k1, k2)
    denom = T * p1 * p2
    S1 = np.einsum("tab,tcb->ac", M, M) / denom
    S2 = np.einsum("tab,tac->bc", M, M) / denom
    G1 = _eig_desc(S1, "sum F F'", notes)
    G2 = _eig_desc(S2, "sum F'F", notes)

    R = np.sqrt(p1) * U_R @ G1
    C = np.sqrt(p2) * U_C @ G2
    F = np.matmul(np.matmul(G1.T, M), G2) / np.sqrt(p1 * p2)

    sr = np.array([_first_sign(R[:, a]) for a in range(R.shape[1])])
    sc = np.array([_first_sign(C[:, b]) for b in range(C.shape[1])])
    R = R * sr
    C = C * sc
    F = F * sr[None, :, None] * sc[None, None, :]
    return FactorParams(R, C, F)


def constraint_residuals(theta: FactorParams) -> ConstraintResidual:
    p1, p2, T = theta.dims
    R, C, F = theta.R, theta.C, theta.F

    def offdiag(S):
        return float(np.max(np.abs(S - np.diag(np.diag(S))))) if S.shape[0] > 1 else 0.0

    return ConstraintResidual(
        r_orth=float(np.max(np.abs(R.T @ R / p1 - np.eye(theta.k1)))),
        c_orth=float(np.max(np.abs(C.T @ C / p2 - np.eye(theta.k2)))),
        f_row_diag=offdiag(np.einsum("tab,tcb->ac", F, F) / T),
        f_col_diag=offdiag(np.einsum("tab,tac->bc", F, F) / T),
        sign_ok_R=tuple(bool(_first_sign(R[:, a]) > 0) for a in range(theta.k1)),
        sign_ok_C=tuple(bool(_first_sign(C[:, b]) > 0) for b in range(theta.k2)),
    )


def sign_align(theta: FactorParams, target: FactorParams) -> FactorParams:
    """Flip loading columns of ``theta`` (and the matching factor rows/columns) to agree with ``target``.

    Both arguments are expected to be normalised with matching factor counts.
    Each column sign is chosen to maximise its inner product with the target.
    """
    sr = np.where(np.sum(theta.R * target.R, axis=0) < 0, -1.0, 1.0)
    sc = np.where(np.sum(theta.C * target.C, axis=0) < 0, -1.0, 1.0)
    return FactorParams(theta.R * sr, theta.C * sc, theta.F * sr[None, :, None] * sc[None, None, :])
