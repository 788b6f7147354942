"""Sandwich variance estimates for loadings and factors, and standardised errors.

For an entity with design rows ``z`` (``F_t c_j`` for a row loading,
``F_t' r_i`` for a column loading, ``c_j kron r_i`` for a factor slice) the
estimate is ``scale * B^-1 M B^-1`` with ``B = -sum l''(pi) z z'`` and
``M = sum l'(pi)^2 z z'``, all evaluated at the fitted natural parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import (
    EVAL_CLAMP,
    FactorParams,
    Problem,
    col_design,
    col_view,
    factor_design,
    factor_hessians,
    factor_view,
    natural_params,
    outer_rows,
    row_design,
    row_view,
    vec_F,
)

__all__ = [
    "SandwichEstimate",
    "SandwichBatch",
    "SingularBreadError",
    "avar_row",
    "avar_col",
    "avar_factor",
    "sandwich_all",
    "inv_sqrt_psd",
    "standardized_errors",
]

EIG_FLOOR = 1e-12


class SingularBreadError(np.linalg.LinAlgError):
    pass


@dataclass
class SandwichEstimate:
    bread: np.ndarray  # inverse of minus the summed l''-weighted outer products
    meat: np.ndarray  # summed l'^2-weighted outer products
    variance: np.ndarray  # scale * bread @ meat @ bread
    scale: float

    def to_dict(self) -> dict:
        return {"variance": self.variance.tolist(), "scale": self.scale}


@dataclass
class SandwichBatch:
    """All entities of one kind: arrays of shape (n, k, k)."""

    kind: str
    bread: np.ndarray
    meat: np.ndarray
    variance: np.ndarray
    scale: float
    condition: np.ndarray  # condition number of each bread block

    def __len__(self) -> int:
        return self.variance.shape[0]

    def __getitem__(self, e: int) -> SandwichEstimate:
        return SandwichEstimate(self.bread[e], self.meat[e], self.variance[e], self.scale)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": self.scale, "variance": self.variance.tolist()}


_KINDS = {
    "row": (row_design, row_view),
    "col": (col_design, col_view),
    "factor": (factor_design, factor_view),
}


def _scale(kind: str, dims) -> float:
    p1, p2, T = dims
    return float({"row": p2 * T, "col": p1 * T, "factor": p1 * p2}[kind])


def sandwich_all(X, fmap, theta: FactorParams, kind: str, clamp: float = EVAL_CLAMP) -> SandwichBatch:
    """Sandwich estimates for every row (``"row"``), column (``"col"``) or slice (``"factor"``)."""
    if kind not in _KINDS:
        raise ValueError(f"kind must be one of {sorted(_KINDS)}")
    problem = X if isinstance(X, Problem) else Problem.build(X, fmap)
    if problem.shape != (theta.dims[2],) + theta.dims[:2]:
        raise ValueError("parameters do not match the data dimensions")
    design, view = _KINDS[kind]
    Z = design(theta)
    k = Z.shape[1]
    if kind == "factor":

        def gram(a):
            return factor_hessians(theta.R, theta.C, a)
    else:
        ZZ = outer_rows(Z)

        def gram(a):
            return (a @ ZZ).reshape(-1, k, k)

    _, d1, d2 = kernels.clamped_terms(problem.codes, problem.x, natural_params(theta), clamp)
    w = problem.weight
    neg_h = gram(view(-d2 * w))
    meat = gram(view(d1 * d1 * w))
    cond = np.linalg.cond(neg_h)
    bad = ~np.isfinite(cond) | (cond > 1e14)
    if bad.any():
        e = int(np.flatnonzero(bad)[0])
        raise SingularBreadError(
            f"{kind} {e + 1}: curvature block is singular (condition number {cond[e]:.3g}); "
            "check for entities with no observed cells or saturated probabilities"
        )
    bread = np.linalg.inv(neg_h)
    bread = 0.5 * (bread + bread.transpose(0, 2, 1))
    scale = _scale(kind, theta.dims)
    var = scale * bread @ meat @ bread
    var = 0.5 * (var + var.transpose(0, 2, 1))
    return SandwichBatch(kind, bread, meat, var, scale, cond)


def _one(kind: str, e: int, X, fmap, theta: FactorParams, n: int, what: str) -> SandwichEstimate:
    if not 1 <= e <= n:
        raise IndexError(f"{what} index {e} out of range 1..{n}")
    return sandwich_all(X, fmap, theta, kind)[e - 1]


def avar_row(i: int, X, fmap, theta: FactorParams) -> SandwichEstimate:
    """Sandwich variance of ``r_i`` (1-based), scaled by ``p2 T``."""
    return _one("row", i, X, fmap, theta, theta.dims[0], "row")


def avar_col(j: int, X, fmap, theta: FactorParams) -> SandwichEstimate:
    """Sandwich variance of ``c_j`` (1-based), scaled by ``p1 T``."""
    return _one("col", j, X, fmap, theta, theta.dims[1], "column")


def avar_factor(t: int, X, fmap, theta: FactorParams) -> SandwichEstimate:
    """Sandwich variance of ``vec(F_t)`` (1-based), scaled by ``p1 p2``."""
    return _one("factor", t, X, fmap, theta, theta.dims[2], "slice")


def inv_sqrt_psd(V: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """Symmetric inverse square root of a (batch of) PSD matrices, eigenvalues floored at ``floor``."""
    lam, Q = np.linalg.eigh(0.5 * (V + np.swapaxes(V, -1, -2)))
    lam = np.maximum(lam, floor)
    return (Q * (1.0 / np.sqrt(lam))[..., None, :]) @ np.swapaxes(Q, -1, -2)


def _signs(theta_hat: FactorParams, theta0: FactorParams):
    sr = np.where(np.sum(theta_hat.R * theta0.R, axis=0) < 0, -1.0, 1.0)
    sc = np.where(np.sum(theta_hat.C * theta0.C, axis=0) < 0, -1.0, 1.0)
    return sr, sc


def standardized_errors(
    theta_hat: FactorParams, theta0: FactorParams, avars: dict[str, SandwichBatch]
) -> dict[str, np.ndarray]:
    """Per-entity ``var^-1/2 sqrt(scale) (est - truth)`` for each kind in ``avars``.

    Both parameter sets should be normalised.  Column signs of the estimate
    are first flipped to agree with the truth, and the variance blocks are
    transformed to match.  Returns arrays of shape (n_entities, k).
    """
    if theta_hat.dims != theta0.dims or (theta_hat.k1, theta_hat.k2) != (theta0.k1, theta0.k2):
        raise ValueError("estimate and truth have different dimensions")
    sr, sc = _signs(theta_hat, theta0)
    sf = np.kron(sc, sr)  # column-major vec(F) index b*k1 + a
    diffs = {
        "row": (theta_hat.R * sr - theta0.R, sr),
        "col": (theta_hat.C * sc - theta0.C, sc),
        "factor": (vec_F(theta_hat.F) * sf - vec_F(theta0.F), sf),
    }
    out = {}
    for kind, batch in avars.items():
        d, s = diffs[kind]
        if batch.variance.shape[:2] != d.shape:
            raise ValueError(f"{kind} variance blocks do not match the parameter shape")
        V = batch.variance * s[None, :, None] * s[None, None, :]
        W = inv_sqrt_psd(V)
        out[kind] = np.einsum("nab,nb->na", W, np.sqrt(batch.scale) * d)
    return out
