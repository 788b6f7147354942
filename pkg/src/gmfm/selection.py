"""Choosing the numbers of factors with a penalised likelihood criterion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .model import FactorParams, Problem
from .report import FitError

log = logging.getLogger(__name__)

__all__ = ["penalty_g", "SelectionGrid", "CriterionRow", "SelectionResult", "select_factor_numbers"]


def penalty_g(p1: int, p2: int, T: int) -> float:
    """``(p1+p2+T)/(p1 p2 T) * ln(p1 p2 T / (p1+p2+T))``."""
    if min(p1, p2, T) < 2:
        raise ValueError("penalty_g needs p1, p2, T >= 2")
    s = p1 + p2 + T
    n = p1 * p2 * T
    return s / n * math.log(n / s)


@dataclass(frozen=True)
class SelectionGrid:
    l1_max: int = 8
    l2_max: int = 8

    def __post_init__(self):
        if self.l1_max < 1 or self.l2_max < 1:
            raise ValueError("grid bounds must be >= 1")

    def check(self, p1: int, p2: int) -> None:
        if self.l1_max > p1 or self.l2_max > p2:
            raise ValueError(f"grid ({self.l1_max}, {self.l2_max}) exceeds data dims ({p1}, {p2})")

    def cells(self) -> list[tuple[int, int]]:
        return [(a, b) for a in range(1, self.l1_max + 1) for b in range(1, self.l2_max + 1)]


@dataclass
class CriterionRow:
    l1: int
    l2: int
    negloglik_scaled: float
    penalty: float
    criterion: float
    message: str = ""


@dataclass
class SelectionResult:
    k1: int
    k2: int
    table: list[CriterionRow]
    warnings: list[str] = field(default_factory=list)

    @property
    def at_boundary(self) -> bool:
        l1m = max(r.l1 for r in self.table)
        l2m = max(r.l2 for r in self.table)
        return self.k1 == l1m or self.k2 == l2m

    def criterion_matrix(self) -> np.ndarray:
        l1m = max(r.l1 for r in self.table)
        l2m = max(r.l2 for r in self.table)
        out = np.full((l1m, l2m), np.inf)
        for r in self.table:
            out[r.l1 - 1, r.l2 - 1] = r.criterion
        return out


def _fit_cell(problem: Problem, l1: int, l2: int, algo: str, options: dict, init: FactorParams | None):
    if algo == "tsam":
        from .tsam import TsamConfig, tsam_fit

        return tsam_fit(problem, None, TsamConfig(l1, l2, **options), init=init)
    if algo == "mm":
        from .mm import MmConfig, mm_fit

        return mm_fit(problem, None, MmConfig(l1, l2, **options), init=init)
    raise ValueError(f"unknown algorithm {algo!r}")


def _pad(theta: FactorParams, l1: int, l2: int, gen: np.random.Generator, eps: float = 0.1) -> FactorParams:
    """Extend a smaller fit with small random columns up to (l1, l2)."""
    p1, p2, T = theta.dims
    R = np.hstack([theta.R, eps * gen.uniform(-1, 1, (p1, l1 - theta.k1))])
    C = np.hstack([theta.C, eps * gen.uniform(-1, 1, (p2, l2 - theta.k2))])
    F = eps * gen.uniform(-1, 1, (T, l1, l2))
    F[:, : theta.k1, : theta.k2] = theta.F
    return FactorParams(R, C, F)


def select_factor_numbers(
    X,
    fmap,
    grid: SelectionGrid = SelectionGrid(),
    algo: str = "tsam",
    fit_options: dict | None = None,
    warm_grid: bool = False,
    jobs: int = 1,
) -> SelectionResult:
    """Fit every ``(l1, l2)`` in the grid and minimise the criterion.

    The criterion is ``-L(theta_hat) / (p1 p2 T) + (l1 + l2) g(p1, p2, T)``.
    Cells whose fit fails score ``inf``.  Ties go to the smaller ``l1 + l2``
    and then to the smaller ``l1``.  With ``warm_grid`` each cell starts from
    the previous cell's estimate padded with small random columns, which is
    faster but makes the cells depend on each other.
    """
    problem = X if isinstance(X, Problem) else Problem.build(X, fmap)
    T, p1, p2 = problem.shape
    grid.check(p1, p2)
    options = dict(fit_options or {})
    g = penalty_g(p1, p2, T)
    scale = float(problem.n_observed)
    seed = int(options.get("seed", 0))

    def run(cell, init=None):
        l1, l2 = cell
        opts = dict(options, seed=rngmod.derive_seed(seed, "grid", l1, l2))
        try:
            theta, rep = _fit_cell(problem, l1, l2, algo, opts, init)
            return theta, rep.loglik, ""
        except (FitError, np.linalg.LinAlgError, FloatingPointError) as exc:
            return None, None, str(exc)

    cells = grid.cells()
    fits: dict[tuple[int, int], tuple] = {}
    if warm_grid:
        gen = rngmod.stream(seed, "warm-grid")
        for l1, l2 in cells:
            prev = fits.get((l1, l2 - 1)) or fits.get((l1 - 1, l2))
            init = _pad(prev[0], l1, l2, gen) if prev is not None and prev[0] is not None else None
            fits[(l1, l2)] = run((l1, l2), init)
    elif jobs != 1 and len(cells) > 1:
        from joblib import Parallel, delayed

        out = Parallel(n_jobs=jobs)(delayed(run)(c) for c in cells)
        fits = dict(zip(cells, out))
    else:
        fits = {c: run(c) for c in cells}

    table: list[CriterionRow] = []
    warnings: list[str] = []
    for l1, l2 in cells:
        _, L, msg = fits[(l1, l2)]
        pen = (l1 + l2) * g
        if L is None or not math.isfinite(L):
            warnings.append(f"fit ({l1}, {l2}) failed: {msg}")
            table.append(CriterionRow(l1, l2, math.inf, pen, math.inf, msg or "failed"))
            continue
        nll = -L / scale
        table.append(CriterionRow(l1, l2, nll, pen, nll + pen))

    finite = [r for r in table if math.isfinite(r.criterion)]
    if not finite:
        raise FitError("every grid cell failed")
    best = min(finite, key=lambda r: (r.criterion, r.l1 + r.l2, r.l1))
    res = SelectionResult(best.l1, best.l2, table, warnings)
    _audit_monotone(table, warnings)
    if best.l1 == grid.l1_max or best.l2 == grid.l2_max:
        warnings.append(f"selected ({best.l1}, {best.l2}) lies on the grid boundary; consider a larger grid")
    return res


def _audit_monotone(table: list[CriterionRow], warnings: list[str], slack: float = 1e-6) -> None:
    """Flag nested cells whose scaled likelihood term got worse (under-optimised fits)."""
    nll = {(r.l1, r.l2): r.negloglik_scaled for r in table}
    bad = []
    for (a, b), v in nll.items():
        for prev in ((a - 1, b), (a, b - 1)):
            if prev in nll and math.isfinite(v) and math.isfinite(nll[prev]) and v > nll[prev] + slack:
                bad.append((a, b))
                break
    if bad:
        warnings.append(f"likelihood term increased on nested cells {bad}; those fits may be under-optimised")

