"""Two-stage alternating maximisation (TSAM).

Stage one alternates per-column, per-row and per-slice likelihood
maximisations, each restricted to the cells of one variable type.  Stage
two applies one Newton step per block on the full likelihood.  The best of
several random restarts is kept and normalised.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .families import FamilyKind
from .model import (
    EVAL_CLAMP,
    FactorParams,
    MatrixSeries,
    Problem,
    _cell_derivs,
    batched_blocks,
    col_design,
    col_view,
    factor_design,
    factor_hessians,
    factor_view,
    natural_params,
    row_design,
    row_view,
    total_loglik,
    unvec_F,
    vec_F,
)
from .newton import batched_newton
from .normalize import IdentifiabilityError, constraint_residuals, normalize
from .report import FitError, FitReport, RestartRecord

log = logging.getLogger(__name__)

__all__ = ["TsamConfig", "IndexSets", "typed_index_sets", "alternating_stage", "one_step_correction", "tsam_fit", "default_clamp"]


def default_clamp(families) -> float:
    """8 when a Poisson cell takes part in the fit, else 30."""
    return 8.0 if FamilyKind.POISSON in set(families) else EVAL_CLAMP


@dataclass
class TsamConfig:
    k1: int
    k2: int
    restarts: int = 5
    max_outer: int = 100
    inner_newton_iters: int = 50
    tol: float = 1e-6
    grad_tol: float = 1e-8
    pi_clamp: float | None = None
    ridge: float = 1e-8
    seed: int = 0
    index_sets: str = "modal"
    correction: bool = True
    warm_start: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("k1 and k2 must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.tol <= 0 or self.grad_tol <= 0 or self.ridge < 0:
            raise ValueError("tolerances must be positive")
        if self.pi_clamp is not None and self.pi_clamp <= 0:
            raise ValueError("pi_clamp must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# --- index sets ----------------------------------------------------------------


@dataclass
class IndexSets:
    """Boolean keep-masks of shape (T, p1, p2) for the three sub-problem families.

    ``col[t, i, j]`` is True when ``(i, t)`` belongs to the set of column ``j``;
    likewise ``row`` (set of row ``i`` over ``(j, t)``) and ``slice`` (set of
    slice ``t`` over ``(i, j)``).
    """

    col: np.ndarray
    row: np.ndarray
    slice: np.ndarray

    def sizes(self) -> dict:
        return {
            "col": self.col.sum(axis=(0, 1)).tolist(),
            "row": self.row.sum(axis=(0, 2)).tolist(),
            "slice": self.slice.sum(axis=(1, 2)).tolist(),
        }


def _line_choice(counts: np.ndarray, preferred: int | None) -> np.ndarray:
    """counts: (n_lines, 5) family counts -> chosen family code per line (modal, ties to lower code)."""
    choice = np.argmax(counts, axis=1)
    if preferred is not None:
        has = counts[:, preferred] > 0
        choice = np.where(has, preferred, choice)
    return choice


def typed_index_sets(fmap, dims, rule: str = "modal", observed: np.ndarray | None = None) -> IndexSets:
    """Per-line single-type index sets.

    ``rule`` is ``"modal"`` (most frequent family of the line, ties broken in
    family order gaussian < poisson < logit < probit < tobit), ``"all"``
    (every observed cell), or ``"prefer:<family>"`` (that family where the
    line contains it, otherwise modal).
    """
    p1, p2, T = dims
    codes = fmap if isinstance(fmap, np.ndarray) else fmap.resolve(p1, p2, T)
    obs = np.ones(codes.shape, bool) if observed is None else observed.astype(bool)
    if rule == "all":
        return IndexSets(obs.copy(), obs.copy(), obs.copy())
    preferred = None
    if rule.startswith("prefer:"):
        preferred = int(FamilyKind.parse(rule.split(":", 1)[1]))
    elif rule != "modal":
        raise ValueError(f"unknown index-set rule {rule!r}")

    onehot = (codes[..., None] == np.arange(5)) & obs[..., None]  # (T, p1, p2, 5)
    col_choice = _line_choice(onehot.sum(axis=(0, 1)), preferred)  # per j
    row_choice = _line_choice(onehot.sum(axis=(0, 2)), preferred)  # per i
    slc_choice = _line_choice(onehot.sum(axis=(1, 2)), preferred)  # per t
    col = (codes == col_choice[None, None, :]) & obs
    row = (codes == row_choice[None, :, None]) & obs
    slc = (codes == slc_choice[:, None, None]) & obs
    return IndexSets(col, row, slc)


# --- stage one -----------------------------------------------------------------


class _Views:
    """Cell arrays laid out per block type, computed once per fit."""

    def __init__(self, problem: Problem, sets: IndexSets | None):
        x, c, w = problem.x, problem.codes, problem.weight
        ws = (w, w, w) if sets is None else (w * sets.col, w * sets.row, w * sets.slice)
        self.col = (np.ascontiguousarray(col_view(x)), np.ascontiguousarray(col_view(c)), np.ascontiguousarray(col_view(ws[0])))
        self.row = (np.ascontiguousarray(row_view(x)), np.ascontiguousarray(row_view(c)), np.ascontiguousarray(row_view(ws[1])))
        self.slc = (np.ascontiguousarray(factor_view(x)), np.ascontiguousarray(factor_view(c)), np.ascontiguousarray(factor_view(ws[2])))


def _rebalance(theta: FactorParams) -> FactorParams:
    try:
        return normalize(theta, notes=[])
    except (IdentifiabilityError, np.linalg.LinAlgError):
        return theta


@dataclass
class StageResult:
    theta: FactorParams
    trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    stalled: int = 0
    singular: int = 0
    monotone_violations: int = 0


def _stage(problem: Problem, config: TsamConfig, init: FactorParams, sets: IndexSets | None, clamp: float) -> StageResult:
    views = _Views(problem, sets)
    theta = init
    res = StageResult(theta)
    kw = dict(clamp=clamp, ridge=config.ridge, grad_tol=config.grad_tol, max_iter=config.inner_newton_iters)
    k1, k2 = theta.k1, theta.k2
    prev = None
    for outer in range(1, config.max_outer + 1):
        # columns, using the current rows and factors
        x, c, w = views.col
        r = batched_newton(col_design(theta), x, c, w, np.array(theta.C), **kw)
        theta = theta.replace(C=r.beta)
        res.stalled += r.stalled
        res.singular += r.singular
        # rows, using the fresh columns
        x, c, w = views.row
        r = batched_newton(row_design(theta), x, c, w, np.array(theta.R), **kw)
        theta = theta.replace(R=r.beta)
        res.stalled += r.stalled
        res.singular += r.singular
        # slices, using the fresh rows and columns
        x, c, w = views.slc
        R_, C_ = theta.R, theta.C
        r = batched_newton(
            factor_design(theta), x, c, w, vec_F(theta.F), hess=lambda d2: factor_hessians(R_, C_, d2), **kw
        )
        theta = theta.replace(F=unvec_F(r.beta, k1, k2))
        res.stalled += r.stalled
        res.singular += r.singular

        if not theta.is_finite():
            raise FloatingPointError("non-finite parameters in alternating stage")
        theta = _rebalance(theta)
        L = total_loglik(problem, None, theta)
        if not math.isfinite(L):
            raise FloatingPointError("non-finite likelihood in alternating stage")
        res.trace.append(L)
        res.iterations = outer
        if prev is not None:
            if L < prev - 1e-9 * (1.0 + abs(prev)):
                res.monotone_violations += 1
            if abs(L - prev) <= config.tol * max(1.0, abs(prev)):
                res.converged = True
                break
        prev = L
    res.theta = theta
    return res


def alternating_stage(X, fmap, config: TsamConfig, init: FactorParams, sets: IndexSets | None = None) -> FactorParams:
    """Stage one of TSAM from ``init``; returns the stage-one estimate (not normalised)."""
    problem = X if isinstance(X, Problem) else Problem.build(X, fmap)
    if sets is None:
        T, p1, p2 = problem.shape
        sets = typed_index_sets(problem.codes, (p1, p2, T), config.index_sets, problem.weight > 0)
    clamp = config.pi_clamp or default_clamp(problem.families)
    return _stage(problem, config, init, sets, clamp).theta


# --- stage two -----------------------------------------------------------------


def _newton_update(beta: np.ndarray, score: np.ndarray, hess: np.ndarray, ridge: float):
    k = beta.shape[1]
    A = hess - ridge * np.eye(k)
    out = np.array(beta, copy=True)
    skipped = 0
    for e in range(beta.shape[0]):
        try:
            step = np.linalg.solve(A[e], score[e])
        except np.linalg.LinAlgError:
            skipped += 1
            continue
        if not np.isfinite(step).all():
            skipped += 1
            continue
        out[e] = beta[e] - step
    return out, skipped


def _correction(problem: Problem, theta: FactorParams, ridge: float, clamp: float):
    d1, d2 = _cell_derivs(problem, theta, clamp)
    k1, k2 = theta.k1, theta.k2
    s, h = batched_blocks(row_design(theta), row_view(d1), row_view(d2))
    R, n1 = _newton_update(np.array(theta.R), s, h, ridge)
    s = factor_view(d1) @ factor_design(theta)
    h = factor_hessians(theta.R, theta.C, factor_view(d2))
    f, n2 = _newton_update(vec_F(theta.F), s, h, ridge)
    s, h = batched_blocks(col_design(theta), col_view(d1), col_view(d2))
    C, n3 = _newton_update(np.array(theta.C), s, h, ridge)
    return FactorParams(R, C, unvec_F(f, k1, k2)), n1 + n2 + n3


def one_step_correction(X, fmap, theta_tilde: FactorParams, ridge: float = 1e-8, clamp: float = EVAL_CLAMP) -> FactorParams:
    """One full-likelihood Newton step for every row, slice and column block, all from ``theta_tilde``."""
    problem = X if isinstance(X, Problem) else Problem.build(X, fmap)
    return _correction(problem, theta_tilde, ridge, clamp)[0]


# --- driver ----------------------------------------------------------------------


def _initial(problem: Problem, config: TsamConfig, restart: int, init: FactorParams | None = None) -> FactorParams:
    T, p1, p2 = problem.shape
    gen = rngmod.stream(config.seed, f"restart/{restart}")
    if init is not None and restart == 1:
        return init
    if config.warm_start:
        from .evalsim.baseline import alpha_pca_fit

        theta = alpha_pca_fit(MatrixSeries(problem.x, problem.weight > 0), config.k1, config.k2)
        # a small random perturbation keeps restarts distinct
        noise = FactorParams.random(p1, p2, T, config.k1, config.k2, gen)
        if restart > 1:
            return FactorParams(theta.R + 0.1 * noise.R, theta.C + 0.1 * noise.C, theta.F + 0.1 * noise.F)
        return theta
    return FactorParams.random(p1, p2, T, config.k1, config.k2, gen)


def _one_restart(problem: Problem, config: TsamConfig, sets: IndexSets, clamp: float, restart: int, init=None):
    try:
        init = _initial(problem, config, restart, init)
        st = _stage(problem, config, init, sets, clamp)
        theta = st.theta
        stage_ll = st.trace[-1] if st.trace else total_loglik(problem, None, theta)
        skipped = 0
        if config.correction:
            theta, skipped = _correction(problem, _rebalance(theta), config.ridge, EVAL_CLAMP)
        L = total_loglik(problem, None, theta)
        if not (theta.is_finite() and math.isfinite(L)):
            raise FloatingPointError("non-finite result after correction")
        rec = RestartRecord(restart, L, st.iterations, st.converged, stage_one_loglik=stage_ll)
        return theta, rec, st, skipped
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        log.debug("restart %d failed: %s", restart, exc)
        return None, RestartRecord(restart, None, 0, False, failed=True, message=str(exc)), None, 0


def _run_restarts(fn, n: int, jobs: int):
    if jobs == 1 or n == 1:
        return [fn(r) for r in range(1, n + 1)]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=jobs)(delayed(fn)(r) for r in range(1, n + 1))


def tsam_fit(X, fmap, config: TsamConfig, init: FactorParams | None = None) -> tuple[FactorParams, FitReport]:
    """Fit by two-stage alternating maximisation and return the normalised estimate.

    ``init``, when given, replaces the first restart's starting point.
    """
    problem = X if isinstance(X, Problem) else Problem.build(X, fmap)
    T, p1, p2 = problem.shape
    if config.k1 > p1 or config.k2 > p2:
        raise ValueError("number of factors exceeds dimension")
    if init is not None and (init.dims != (p1, p2, T) or (init.k1, init.k2) != (config.k1, config.k2)):
        raise ValueError("init does not match the data and factor numbers")
    clamp = config.pi_clamp or default_clamp(problem.families)
    sets = typed_index_sets(problem.codes, (p1, p2, T), config.index_sets, problem.weight > 0)
    report = FitReport("tsam", config.k1, config.k2, pi_clamp=clamp, config=config.to_dict())
    sizes = sets.sizes()
    report.index_set_sizes = {
        "rule": config.index_sets,
        "col_min": int(min(sizes["col"])),
        "row_min": int(min(sizes["row"])),
        "slice_min": int(min(sizes["slice"])),
    }

    results = _run_restarts(lambda r: _one_restart(problem, config, sets, clamp, r, init), config.restarts, config.jobs)
    best = None
    for theta, rec, st, skipped in results:
        report.restarts.append(rec)
        if rec.failed:
            report.warn(f"restart {rec.restart} failed: {rec.message}")
            continue
        if best is None or rec.loglik > best[1].loglik:
            best = (theta, rec, st, skipped)
    if best is None:
        raise FitError("all restarts failed", report)

    theta, rec, st, skipped = best
    report.best_restart = rec.restart
    report.loglik_trace = list(st.trace)
    report.monotone_violations = st.monotone_violations
    report.skipped_corrections = skipped
    if skipped:
        report.warn(f"{skipped} correction blocks skipped (singular Hessian)")
    if st.stalled:
        report.warn(f"line search stalled in {st.stalled} sub-problems")
    if not rec.converged:
        report.warn("alternating stage reached max_outer without converging")
    pi = natural_params(theta)
    report.clamped_cells = int(np.sum((np.abs(pi) > clamp) & (problem.weight > 0)))
    if report.clamped_cells:
        report.warn(
            f"{report.clamped_cells} fitted natural parameters exceed the clamp {clamp:g}; "
            "binary cells may be separated, in which case the likelihood has no finite maximiser"
        )
    report.residuals_before = constraint_residuals(theta).to_dict()
    notes: list[str] = []
    try:
        theta = normalize(theta, notes)
    except IdentifiabilityError as exc:
        raise FitError(f"normalisation failed: {exc}", report) from exc
    for n in notes:
        report.warn(n)
    report.residuals_after = constraint_residuals(theta).to_dict()
    report.loglik = total_loglik(problem, None, theta)
    return theta, report
