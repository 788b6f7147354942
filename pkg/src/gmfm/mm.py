"""Minorisation-maximisation (MM) fitting.

Each step replaces the log-likelihood by the quadratic lower bound
``l(pi0) + d1 (pi - pi0) - (b_U / 2)(pi - pi0)^2``, whose maximiser over the
factor structure is a (weighted) least-squares matrix factorisation of the
working data ``pi0 + d1 / b_U``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from . import rng as rngmod
from .families import FamilyKind, curvature_bound
from .model import (
    EVAL_CLAMP,
    FactorParams,
    Problem,
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
from .normalize import IdentifiabilityError, constraint_residuals, normalize
from .report import FitError, FitReport, RestartRecord
from .tsam import _rebalance, _run_restarts, default_clamp

log = logging.getLogger(__name__)

__all__ = ["MmConfig", "cell_curvature", "surrogate_targets", "ls_factorize", "mm_fit"]


@dataclass
class MmConfig:
    k1: int
    k2: int
    restarts: int = 5
    max_outer: int = 500
    error_tol: float = 1e-6
    inner_als_sweeps: int = 1
    inner_exact: bool = False
    pi_clamp: float | None = None
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("k1 and k2 must be positive")
        if self.restarts < 1 or self.inner_als_sweeps < 1:
            raise ValueError("restarts and inner_als_sweeps must be >= 1")
        if self.error_tol <= 0:
            raise ValueError("error_tol must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def cell_curvature(codes: np.ndarray, pi_clamp: float) -> tuple[np.ndarray, dict[str, float]]:
    """Per-cell curvature bound array plus the per-family values used."""
    bounds = {}
    out = np.empty(codes.shape)
    for c in np.unique(codes):
        fam = FamilyKind(int(c))
        b = curvature_bound(fam, pi_clamp)
        bounds[fam.tag] = b
        out[codes == c] = b
    return out, bounds


def surrogate_targets(X, fmap, theta: FactorParams, b_U, clamp: float = EVAL_CLAMP) -> np.ndarray:
    """Working data ``pi + d1(x, pi) / b_U`` per cell, shape (T, p1, p2)."""
    problem = X if isinstance(X, Problem) else Problem.build(X, fmap)
    pi = natural_params(theta)
    _, d1, _ = kernels.clamped_terms(problem.codes, problem.x, pi, clamp)
    return pi + d1 / np.asarray(b_U, dtype=float)


def _ls_solve(Z, target, w, beta, ridge, flags, hess=None):
    if hess is None:
        score, H = batched_blocks(Z, w * target, w)
    else:
        score, H = (w * target) @ Z, hess(w)
    k = Z.shape[1]
    r = ridge
    for _ in range(6):
        A = H + r * np.eye(k)
        try:
            out = np.linalg.solve(A, score[..., None])[..., 0]
        except np.linalg.LinAlgError:
            out = None
        if out is not None and np.isfinite(out).all():
            if r != ridge:
                flags.append(f"ridge escalated to {r:g}")
            return out
        r = max(r * 100.0, 1e-12)
    flags.append("least-squares block could not be solved; kept previous value")
    return beta


def _ls_objective(Xhat, w, theta) -> float:
    return float(np.sum(w * (Xhat - natural_params(theta)) ** 2))


def ls_factorize(
    Xhat: np.ndarray,
    k1: int,
    k2: int,
    init: FactorParams,
    sweeps: int = 1,
    weights: np.ndarray | None = None,
    ridge: float = 1e-10,
    exact: bool = False,
    flags: list | None = None,
) -> FactorParams:
    """Alternating least squares for ``sum w (Xhat - r_i' F_t c_j)^2`` starting from ``init``.

    One sweep solves for every ``r_i``, then every ``f_t``, then every ``c_j``
    in closed form, so the objective never increases.  With ``exact`` the
    sweeps continue until the relative change drops below 1e-10.
    """
    Xhat = np.asarray(Xhat, dtype=float)
    if (init.k1, init.k2) != (k1, k2):
        raise ValueError("init does not match (k1, k2)")
    w = np.ones(Xhat.shape) if weights is None else np.asarray(weights, dtype=float)
    flags = [] if flags is None else flags
    theta = init
    xr, wr = row_view(Xhat), row_view(w)
    xf, wf = factor_view(Xhat), factor_view(w)
    xc, wc = col_view(Xhat), col_view(w)
    prev = _ls_objective(Xhat, w, theta) if exact else None
    n = 10_000 if exact else sweeps
    for _ in range(n):
        theta = theta.replace(R=_ls_solve(row_design(theta), xr, wr, theta.R, ridge, flags))
        R_, C_ = theta.R, theta.C
        f = _ls_solve(
            factor_design(theta), xf, wf, vec_F(theta.F), ridge, flags, lambda d: factor_hessians(R_, C_, d)
        )
        theta = theta.replace(F=unvec_F(f, k1, k2))
        theta = theta.replace(C=_ls_solve(col_design(theta), xc, wc, theta.C, ridge, flags))
        if exact:
            cur = _ls_objective(Xhat, w, theta)
            if abs(prev - cur) <= 1e-10 * max(prev, 1e-300):
                break
            prev = cur
            theta = _rebalance(theta)
    return theta


def _initial(problem: Problem, config: MmConfig, restart: int, init: FactorParams | None = None) -> FactorParams:
    if init is not None and restart == 1:
        return init
    T, p1, p2 = problem.shape
    return FactorParams.random(p1, p2, T, config.k1, config.k2, rngmod.stream(config.seed, f"restart/{restart}"))


def _mm_restart(problem: Problem, config: MmConfig, bU: np.ndarray, clamp: float, restart: int, init=None):
    flags: list[str] = []
    try:
        theta = _initial(problem, config, restart, init)
        weights = bU * problem.weight
        L = total_loglik(problem, None, theta)
        trace = [L]
        violations = 0
        converged = False
        it = 0
        for it in range(1, config.max_outer + 1):
            Xhat = surrogate_targets(problem, None, theta, bU, clamp)
            theta = ls_factorize(
                Xhat, config.k1, config.k2, theta,
                sweeps=config.inner_als_sweeps, weights=weights, exact=config.inner_exact, flags=flags,
            )
            if not theta.is_finite():
                raise FloatingPointError("non-finite parameters in MM step")
            theta = _rebalance(theta)
            L_new = total_loglik(problem, None, theta)
            if not math.isfinite(L_new):
                raise FloatingPointError("non-finite likelihood in MM step")
            if L_new < L - 1e-10 * max(1.0, abs(L)):
                violations += 1
            trace.append(L_new)
            gain = L_new - L
            L = L_new
            if gain <= config.error_tol:
                converged = True
                break
        rec = RestartRecord(restart, L, it, converged)
        return theta, rec, trace, violations, flags
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        log.debug("restart %d failed: %s", restart, exc)
        return None, RestartRecord(restart, None, 0, False, failed=True, message=str(exc)), [], 0, flags


def mm_fit(X, fmap, config: MmConfig, init: FactorParams | None = None) -> tuple[FactorParams, FitReport]:
    """Fit by minorisation-maximisation and return the normalised estimate.

    ``init``, when given, replaces the first restart's starting point.
    """
    problem = X if isinstance(X, Problem) else Problem.build(X, fmap)
    T, p1, p2 = problem.shape
    if config.k1 > p1 or config.k2 > p2:
        raise ValueError("number of factors exceeds dimension")
    if init is not None and (init.dims != (p1, p2, T) or (init.k1, init.k2) != (config.k1, config.k2)):
        raise ValueError("init does not match the data and factor numbers")
    clamp = config.pi_clamp or default_clamp(problem.families)
    bU, bounds = cell_curvature(problem.codes, clamp)
    report = FitReport("mm", config.k1, config.k2, pi_clamp=clamp, curvature_bounds=bounds, config=config.to_dict())
    if FamilyKind.POISSON in problem.families:
        report.warn(
            f"Poisson cells use the domain-restricted bound b_U = exp({clamp:g}); "
            "MM is intended for probit, logit and tobit data and converges slowly here"
        )
    if FamilyKind.TOBIT in problem.families:
        report.warn("Tobit curvature bound is computed numerically on the clamped domain")

    results = _run_restarts(lambda r: _mm_restart(problem, config, bU, clamp, r, init), config.restarts, config.jobs)
    best = None
    for theta, rec, trace, violations, flags in results:
        report.restarts.append(rec)
        for f in flags:
            report.warn(f)
        if rec.failed:
            report.warn(f"restart {rec.restart} failed: {rec.message}")
            continue
        if best is None or rec.loglik > best[1].loglik:
            best = (theta, rec, trace, violations)
    if best is None:
        raise FitError("all restarts failed", report)
    theta, rec, trace, violations = best
    report.best_restart = rec.restart
    report.loglik_trace = list(trace)
    report.monotone_violations = violations
    if not rec.converged:
        report.warn("MM reached max_outer without converging")
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
