"""Data model and likelihood for generalized matrix factor models.

Layout conventions used throughout the package:

* observed data ``values`` has shape ``(T, p1, p2)``;
* ``R`` is ``(p1, k1)``, ``C`` is ``(p2, k2)`` and ``F`` is ``(T, k1, k2)``;
* the natural parameter of cell ``(i, j, t)`` is ``pi = r_i' F_t c_j``;
* the vectorised factor ``f_t`` is ``vec(F_t)`` in column-major order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .families import FamilyKind, validate_support

__all__ = [
    "FamilyBlock",
    "FamilyMap",
    "MatrixSeries",
    "FactorParams",
    "PenaltyWeights",
    "Problem",
    "natural_params",
    "total_loglik",
    "penalty",
    "objective_Q",
    "row_block",
    "col_block",
    "factor_block",
    "EVAL_CLAMP",
]

#: Clamp on |pi| used when evaluating likelihoods.
EVAL_CLAMP = 30.0


@dataclass(frozen=True)
class FamilyBlock:
    """Rectangular override of the default family.  Ranges are 1-based inclusive; ``None`` means all."""

    family: FamilyKind
    rows: tuple[int, int] | None = None
    cols: tuple[int, int] | None = None
    slices: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", FamilyKind.parse(self.family))

    def to_dict(self) -> dict:
        d: dict = {"family": self.family.tag}
        for name in ("rows", "cols", "slices"):
            v = getattr(self, name)
            if v is not None:
                d[name] = [int(v[0]), int(v[1])]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FamilyBlock":
        def rng(name):
            v = d.get(name)
            if v is None:
                return None
            lo, hi = int(v[0]), int(v[1])
            if lo < 1 or hi < lo:
                raise ValueError(f"bad {name} range {v!r} in family block")
            return (lo, hi)

        return cls(FamilyKind.parse(d["family"]), rng("rows"), rng("cols"), rng("slices"))


@dataclass(frozen=True)
class FamilyMap:
    """Assigns a likelihood family to every cell; later blocks override earlier ones."""

    default: FamilyKind = FamilyKind.GAUSSIAN
    blocks: tuple[FamilyBlock, ...] = ()

    @classmethod
    def uniform(cls, family: "FamilyKind | str") -> "FamilyMap":
        return cls(FamilyKind.parse(family))

    def resolve(self, p1: int, p2: int, T: int) -> np.ndarray:
        """Family codes as an int8 array of shape ``(T, p1, p2)``."""
        codes = np.full((T, p1, p2), int(FamilyKind.parse(self.default)), dtype=np.int8)

        def sl(r, n):
            if r is None:
                return slice(0, n)
            if r[1] > n:
                raise ValueError(f"family block range {r} exceeds dimension {n}")
            return slice(r[0] - 1, r[1])

        for b in self.blocks:
            codes[sl(b.slices, T), sl(b.rows, p1), sl(b.cols, p2)] = int(FamilyKind.parse(b.family))
        return codes

    def families(self) -> set[FamilyKind]:
        return {FamilyKind.parse(self.default)} | {FamilyKind.parse(b.family) for b in self.blocks}

    def to_dict(self) -> dict:
        return {"default": FamilyKind.parse(self.default).tag, "blocks": [b.to_dict() for b in self.blocks]}

    @classmethod
    def from_dict(cls, d: dict) -> "FamilyMap":
        return cls(FamilyKind.parse(d.get("default", "gaussian")), tuple(FamilyBlock.from_dict(b) for b in d.get("blocks", [])))


@dataclass(frozen=True)
class MatrixSeries:
    """``T`` observed ``p1 x p2`` matrices; ``mask`` is True where a cell is observed."""

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 3:
            raise ValueError(f"values must have shape (T, p1, p2), got {v.shape}")
        T, p1, p2 = v.shape
        if p1 < 2 or p2 < 2 or T < 1:
            raise ValueError(f"need p1, p2 >= 2 and T >= 1, got p1={p1}, p2={p2}, T={T}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.mask is not None:
            m = np.array(self.mask, dtype=bool)
            if m.shape != v.shape:
                raise ValueError("mask shape must match values")
            if m.all():
                m = None
            else:
                m.setflags(write=False)
            object.__setattr__(self, "mask", m)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def p1(self) -> int:
        return self.values.shape[1]

    @property
    def p2(self) -> int:
        return self.values.shape[2]

    @property
    def observed(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.values.shape, dtype=bool)
        return self.mask

    def slices(self, idx: "Sequence[int] | slice") -> "MatrixSeries":
        """Sub-series of the selected slices (0-based)."""
        return MatrixSeries(self.values[idx], None if self.mask is None else self.mask[idx])


@dataclass(frozen=True)
class FactorParams:
    R: np.ndarray
    C: np.ndarray
    F: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        C = np.array(self.C, dtype=float)
        F = np.array(self.F, dtype=float)
        if R.ndim != 2 or C.ndim != 2 or F.ndim != 3:
            raise ValueError("expected R (p1,k1), C (p2,k2), F (T,k1,k2)")
        if F.shape[1:] != (R.shape[1], C.shape[1]):
            raise ValueError(f"F slices are {F.shape[1:]}, expected {(R.shape[1], C.shape[1])}")
        if R.shape[1] > R.shape[0] or C.shape[1] > C.shape[0]:
            raise ValueError("number of factors exceeds dimension")
        for a in (R, C, F):
            a.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "F", F)

    @property
    def k1(self) -> int:
        return self.R.shape[1]

    @property
    def k2(self) -> int:
        return self.C.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.R.shape[0], self.C.shape[0], self.F.shape[0]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.R).all() and np.isfinite(self.C).all() and np.isfinite(self.F).all())

    def replace(self, **kw) -> "FactorParams":
        d = {"R": self.R, "C": self.C, "F": self.F}
        d.update(kw)
        return FactorParams(**d)

    @classmethod
    def random(cls, p1: int, p2: int, T: int, k1: int, k2: int, rng: np.random.Generator) -> "FactorParams":
        """Entries iid uniform on [-1, 1]."""
        return cls(
            rng.uniform(-1.0, 1.0, (p1, k1)),
            rng.uniform(-1.0, 1.0, (p2, k2)),
            rng.uniform(-1.0, 1.0, (T, k1, k2)),
        )


@dataclass(frozen=True)
class PenaltyWeights:
    b1: float = 1.0
    b2: float = 1.0
    b3: float = 1.0

    def __post_init__(self):
        if min(self.b1, self.b2, self.b3) <= 0:
            raise ValueError("penalty weights must be strictly positive")


@dataclass
class Problem:
    """Validated, array-level view of a data bundle.

    ``x`` holds the observations with missing cells replaced by a value in
    the family support, ``weight`` is 1.0 on observed cells and 0.0 elsewhere.
    """

    x: np.ndarray
    codes: np.ndarray
    weight: np.ndarray
    families: frozenset = field(default_factory=frozenset)

    @classmethod
    def build(cls, X: MatrixSeries, fmap: FamilyMap | np.ndarray) -> "Problem":
        codes = fmap if isinstance(fmap, np.ndarray) else fmap.resolve(X.p1, X.p2, X.T)
        codes = np.ascontiguousarray(codes, dtype=np.int8)
        if codes.shape != X.values.shape:
            raise ValueError(f"family map resolves to {codes.shape}, data is {X.values.shape}")
        obs = X.observed
        validate_support(codes, X.values, obs)
        x = np.where(obs, X.values, 0.0)
        return cls(
            np.ascontiguousarray(x),
            codes,
            obs.astype(float),
            frozenset(FamilyKind(int(c)) for c in np.unique(codes[obs])),
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.x.shape

    @property
    def n_observed(self) -> int:
        return int(self.weight.sum())

    def restrict(self, keep: np.ndarray) -> "Problem":
        """Same data with extra cells dropped (``keep`` False)."""
        return Problem(self.x, self.codes, self.weight * keep, self.families)


def _as_problem(X, fmap) -> Problem:
    if isinstance(X, Problem):
        return X
    return Problem.build(X, fmap)


def natural_params(theta: FactorParams, clamp: float | None = None) -> np.ndarray:
    """``pi[t] = R F_t C'``, shape ``(T, p1, p2)``, optionally clipped to ``[-clamp, clamp]``."""
    pi = np.matmul(np.matmul(theta.R, theta.F), theta.C.T)
    if clamp is not None:
        np.clip(pi, -clamp, clamp, out=pi)
    return pi


def cell_logliks(problem: Problem, pi: np.ndarray, clamp: float = EVAL_CLAMP) -> np.ndarray:
    """Weighted per-cell log-likelihood (zero on missing cells)."""
    return problem.weight * kernels.clamped_loglik(problem.codes, problem.x, pi, clamp)


def total_loglik(X, fmap, theta: FactorParams, clamp: float = EVAL_CLAMP) -> float:
    """Sum of cell log-likelihoods over observed cells."""
    problem = _as_problem(X, fmap)
    return float(cell_logliks(problem, natural_params(theta), clamp).sum())


def _pair_sq(G: np.ndarray) -> float:
    iu = np.triu_indices(G.shape[0], 1)
    return float(np.sum(G[iu] ** 2))


def penalty_terms(theta: FactorParams, w: PenaltyWeights = PenaltyWeights(), dims=None) -> tuple[float, float, float]:
    """``(P1, P2, P3)``: the identification penalties, each <= 0."""
    R, C, F = theta.R, theta.C, theta.F
    p1, p2, T = dims if dims is not None else theta.dims
    if (p1, p2, T) != theta.dims:
        raise ValueError(f"dims {(p1, p2, T)} do not match parameters {theta.dims}")
    RR = R.T @ R
    CC = C.T @ C
    FF_row = np.einsum("tab,tcb->ac", F, F)  # sum_t F_t F_t'
    FF_col = np.einsum("tab,tac->bc", F, F)  # sum_t F_t' F_t
    scale = p1 * p2 * T
    p1_term = (
        _pair_sq(RR) / (2 * p1**2)
        + np.sum((np.diag(RR) - p1) ** 2) / (8 * p1**2)
        + _pair_sq(FF_row) / (2 * T**2)
    )
    p2_term = (
        _pair_sq(CC) / (2 * p2**2)
        + np.sum((np.diag(CC) - p2) ** 2) / (8 * p2**2)
        + _pair_sq(FF_col) / (2 * T**2)
    )
    # inner sum over i of ((r_ip^2 - 1)/2) f_pq + sum_{k != p} r_ip r_ik f_kq
    A = RR - np.diag(np.diag(RR))
    D = (np.diag(RR) - p1) / 2.0
    inner = D[None, :, None] * F + np.einsum("pk,tkq->tpq", A, F)
    P3 = -w.b3 * p2 * float(np.sum(inner**2)) / (2 * p1)
    return -w.b1 * scale * float(p1_term), -w.b2 * scale * float(p2_term), P3


def penalty(theta: FactorParams, w: PenaltyWeights = PenaltyWeights(), dims=None) -> float:
    return float(sum(penalty_terms(theta, w, dims)))


def objective_Q(X, fmap, theta: FactorParams, w: PenaltyWeights = PenaltyWeights()) -> float:
    """Penalised likelihood ``L + P``.  A diagnostic: the fitting code never evaluates it."""
    problem = _as_problem(X, fmap)
    return total_loglik(problem, None, theta) + penalty(theta, w, problem.shape[1:] + problem.shape[:1])


# --- block designs -----------------------------------------------------------
#
# Each block type (rows, columns, slices) is a batch of small GLM problems that
# share one design matrix Z (m x k): entity e owns the cells ``view[e]`` and
# pi[e, :] = Z @ beta_e.  Arranging the cells this way turns the per-entity
# score and Hessian sums into two matrix products.


def row_design(theta: FactorParams) -> np.ndarray:
    """Rows of ``F_t c_j`` ordered by (t, j): shape ``(T*p2, k1)``."""
    Z = np.matmul(theta.F, theta.C.T)  # (T, k1, p2)
    return np.ascontiguousarray(Z.transpose(0, 2, 1).reshape(-1, theta.k1))


def col_design(theta: FactorParams) -> np.ndarray:
    """Rows of ``F_t' r_i`` ordered by (t, i): shape ``(T*p1, k2)``."""
    Z = np.matmul(theta.R, theta.F)  # (T, p1, k2)
    return np.ascontiguousarray(Z.reshape(-1, theta.k2))


def factor_design(theta: FactorParams) -> np.ndarray:
    """Rows of ``c_j kron r_i`` ordered by (i, j): shape ``(p1*p2, k1*k2)``."""
    Z = np.einsum("jb,ia->ijba", theta.C, theta.R)
    return np.ascontiguousarray(Z.reshape(-1, theta.k1 * theta.k2))


def row_view(a: np.ndarray) -> np.ndarray:
    T, p1, p2 = a.shape
    return a.transpose(1, 0, 2).reshape(p1, T * p2)


def col_view(a: np.ndarray) -> np.ndarray:
    T, p1, p2 = a.shape
    return a.transpose(2, 0, 1).reshape(p2, T * p1)


def factor_view(a: np.ndarray) -> np.ndarray:
    T, p1, p2 = a.shape
    return a.reshape(T, p1 * p2)


def vec_F(F: np.ndarray) -> np.ndarray:
    """Column-major vectorisation of each slice: ``(T, k1, k2) -> (T, k1*k2)``."""
    return F.transpose(0, 2, 1).reshape(F.shape[0], -1)


def unvec_F(f: np.ndarray, k1: int, k2: int) -> np.ndarray:
    return f.reshape(f.shape[0], k2, k1).transpose(0, 2, 1)


def outer_rows(Z: np.ndarray) -> np.ndarray:
    """``(m, k) -> (m, k*k)`` row-wise outer products."""
    return (Z[:, :, None] * Z[:, None, :]).reshape(Z.shape[0], -1)


def factor_hessians(R: np.ndarray, C: np.ndarray, d2w: np.ndarray) -> np.ndarray:
    """``sum_ij d2[n, i, j] (c_j c_j') kron (r_i r_i')`` for each slice, shape (n, k1*k2, k1*k2).

    Equal to ``batched_blocks(factor_design(theta), ...)[1]`` but built in two
    contractions (rows first, then columns) instead of one over the full
    ``(p1 p2, (k1 k2)^2)`` outer-product design.
    """
    p1, k1 = R.shape
    p2, k2 = C.shape
    n = d2w.shape[0]
    A = np.swapaxes(d2w.reshape(n, p1, p2), 1, 2) @ outer_rows(R)  # (n, p2, k1*k1)
    H = np.swapaxes(A, 1, 2) @ outer_rows(C)  # (n, k1*k1, k2*k2)
    H = H.reshape(n, k1, k1, k2, k2).transpose(0, 3, 1, 4, 2)
    return np.ascontiguousarray(H).reshape(n, k1 * k2, k1 * k2)


def batched_blocks(Z: np.ndarray, d1w: np.ndarray, d2w: np.ndarray, ZZ: np.ndarray | None = None):
    """Scores ``(n, k)`` and Hessians ``(n, k, k)`` from weighted derivatives ``(n, m)``."""
    k = Z.shape[1]
    if ZZ is None:
        ZZ = outer_rows(Z)
    score = d1w @ Z
    hess = (d2w @ ZZ).reshape(-1, k, k)
    return score, hess


def _cell_derivs(problem: Problem, theta: FactorParams, clamp: float):
    _, d1, d2 = kernels.clamped_terms(problem.codes, problem.x, natural_params(theta), clamp)
    return d1 * problem.weight, d2 * problem.weight


def all_row_blocks(problem: Problem, theta: FactorParams, clamp: float = EVAL_CLAMP):
    d1, d2 = _cell_derivs(problem, theta, clamp)
    return batched_blocks(row_design(theta), row_view(d1), row_view(d2))


def all_col_blocks(problem: Problem, theta: FactorParams, clamp: float = EVAL_CLAMP):
    d1, d2 = _cell_derivs(problem, theta, clamp)
    return batched_blocks(col_design(theta), col_view(d1), col_view(d2))


def all_factor_blocks(problem: Problem, theta: FactorParams, clamp: float = EVAL_CLAMP):
    d1, d2 = _cell_derivs(problem, theta, clamp)
    score = factor_view(d1) @ factor_design(theta)
    return score, factor_hessians(theta.R, theta.C, factor_view(d2))


def _entity(i: int, n: int, what: str) -> int:
    if not 1 <= i <= n:
        raise IndexError(f"{what} index {i} out of range 1..{n}")
    return i - 1


def row_block(i: int, X, fmap, theta: FactorParams):
    """Score and Hessian of the log-likelihood in ``r_i`` (``i`` is 1-based)."""
    problem = _as_problem(X, fmap)
    e = _entity(i, problem.shape[1], "row")
    d1, d2 = _cell_derivs(problem, theta, EVAL_CLAMP)
    s, h = batched_blocks(row_design(theta), row_view(d1)[e : e + 1], row_view(d2)[e : e + 1])
    return s[0], h[0]


def col_block(j: int, X, fmap, theta: FactorParams):
    """Score and Hessian in ``c_j`` (``j`` is 1-based)."""
    problem = _as_problem(X, fmap)
    e = _entity(j, problem.shape[2], "column")
    d1, d2 = _cell_derivs(problem, theta, EVAL_CLAMP)
    s, h = batched_blocks(col_design(theta), col_view(d1)[e : e + 1], col_view(d2)[e : e + 1])
    return s[0], h[0]


def factor_block(t: int, X, fmap, theta: FactorParams):
    """Score and Hessian in ``f_t = vec(F_t)`` (``t`` is 1-based)."""
    problem = _as_problem(X, fmap)
    e = _entity(t, problem.shape[0], "slice")
    d1, d2 = _cell_derivs(problem, theta, EVAL_CLAMP)
    s = factor_view(d1)[e : e + 1] @ factor_design(theta)
    return s[0], factor_hessians(theta.R, theta.C, factor_view(d2)[e : e + 1])[0]
