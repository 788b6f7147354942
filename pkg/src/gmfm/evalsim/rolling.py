"""Rolling validation: fit loadings on a trailing window, reconstruct the next period."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..families import family_mean
from ..model import FactorParams, FamilyMap, MatrixSeries, Problem, factor_design, factor_hessians, factor_view, natural_params, unvec_F
from ..newton import batched_newton
from .baseline import alpha_pca_fit


@dataclass
class RollingResult:
    periods: list[int] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)
    rho: list[float] = field(default_factory=list)

    @property
    def mse_bar(self) -> float:
        return float(np.mean(self.mse)) if self.mse else float("nan")

    @property
    def rho_bar(self) -> float:
        return float(np.mean(self.rho)) if self.rho else float("nan")

    def to_dict(self) -> dict:
        return {
            "periods": [
                {"period": p, "mse": m, "rho": r} for p, m, r in zip(self.periods, self.mse, self.rho)
            ],
            "mse_bar": self.mse_bar,
            "rho_bar": self.rho_bar,
        }


def period_scores(Y: np.ndarray, Yhat: np.ndarray, observed: np.ndarray | None = None) -> tuple[float, float]:
    """``(MSE, rho)`` for one period of ``q`` slices, arrays of shape (q, p1, p2)."""
    obs = np.ones(Y.shape, bool) if observed is None else observed
    q, p1, p2 = Y.shape
    err = float(np.sum(((Yhat - Y) ** 2)[obs]))
    Ybar = np.sum(np.where(obs, Y, 0.0), axis=0) / np.maximum(obs.sum(axis=0), 1)
    tot = float(np.sum(((Y - Ybar[None]) ** 2)[obs]))
    return err / (q * p1 * p2), err / tot if tot > 0 else float("inf")


def project_factors(X: MatrixSeries, fmap, R: np.ndarray, C: np.ndarray, clamp: float = 30.0) -> np.ndarray:
    """Per-slice maximum-likelihood factors with loadings held fixed, shape (T, k1, k2)."""
    problem = X if isinstance(X, Problem) else Problem.build(X, fmap)
    k1, k2 = R.shape[1], C.shape[1]
    T = problem.shape[0]
    theta = FactorParams(R, C, np.zeros((T, k1, k2)))
    res = batched_newton(
        factor_design(theta),
        np.ascontiguousarray(factor_view(problem.x)),
        np.ascontiguousarray(factor_view(problem.codes)),
        np.ascontiguousarray(factor_view(problem.weight)),
        np.zeros((T, k1 * k2)),
        clamp=clamp,
        hess=lambda d2: factor_hessians(R, C, d2),
    )
    return unvec_F(res.beta, k1, k2)


def _fit_loadings(X: MatrixSeries, fmap: FamilyMap, k1: int, k2: int, algo: str, fit_options: dict):
    if algo in ("alpha_pca", "alpha-pca", "pca"):
        return alpha_pca_fit(X, k1, k2)
    if algo == "tsam":
        from ..tsam import TsamConfig, tsam_fit

        return tsam_fit(X, fmap, TsamConfig(k1, k2, **fit_options))[0]
    if algo == "mm":
        from ..mm import MmConfig, mm_fit

        return mm_fit(X, fmap, MmConfig(k1, k2, **fit_options))[0]
    raise ValueError(f"unknown algorithm {algo!r}")


def rolling_validate(
    X: MatrixSeries,
    fmap: FamilyMap,
    window_years: int,
    quarters_per_period: int,
    k1: int,
    k2: int,
    algo: str = "tsam",
    fit_options: dict | None = None,
) -> RollingResult:
    """Score one-period-ahead reconstructions across all evaluation periods.

    Periods are consecutive blocks of ``quarters_per_period`` slices.  For
    each period after the first ``window_years``, loadings are fitted on the
    preceding window.  GMFM algorithms estimate the in-period factors by
    per-slice maximum likelihood and reconstruct with the family mean; the
    ``alpha_pca`` baseline uses its own projection and a linear reconstruction.
    """
    q = int(quarters_per_period)
    if q < 1 or window_years < 1:
        raise ValueError("window and period length must be positive")
    if X.T % q:
        raise ValueError(f"T={X.T} is not a multiple of the period length {q}")
    n_periods = X.T // q
    if n_periods <= window_years:
        raise ValueError(f"insufficient history: {n_periods} periods for a window of {window_years}")
    fit_options = dict(fit_options or {})
    codes = fmap.resolve(X.p1, X.p2, X.T)
    obs = X.observed
    out = RollingResult()
    linear = algo in ("alpha_pca", "alpha-pca", "pca")
    for period in range(window_years, n_periods):
        train = slice((period - window_years) * q, period * q)
        test = slice(period * q, (period + 1) * q)
        theta = _fit_loadings(X.slices(train), fmap_window(fmap, X, train), k1, k2, algo, fit_options)
        Xt = X.slices(test)
        if linear:
            Yt = np.where(Xt.observed, Xt.values, 0.0)
            F = np.matmul(np.matmul(theta.R.T, Yt), theta.C) / (X.p1 * X.p2)
            Yhat = natural_params(FactorParams(theta.R, theta.C, F))
        else:
            F = project_factors(Xt, codes[test], theta.R, theta.C)
            Yhat = family_mean(codes[test], natural_params(FactorParams(theta.R, theta.C, F)))
        mse, rho = period_scores(Xt.values, Yhat, obs[test])
        out.periods.append(period + 1)
        out.mse.append(mse)
        out.rho.append(rho)
    return out


def fmap_window(fmap: FamilyMap, X: MatrixSeries, sl: slice) -> np.ndarray:
    """Resolved family codes restricted to a window of slices."""
    return fmap.resolve(X.p1, X.p2, X.T)[sl]
