"""Batched damped Newton for many small GLM problems sharing one design.

Entity ``e`` maximises ``sum_m w[e, m] * l(x[e, m], (Z @ beta_e)[m])`` over
``beta_e``.  All entities advance together; the score and Hessian for the
whole batch are two matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import outer_rows


@dataclass
class NewtonResult:
    beta: np.ndarray
    objective: np.ndarray
    iterations: int
    stalled: int  # entities whose line search gave up
    singular: int  # entities whose Hessian could not be solved


def _solve(A: np.ndarray, b: np.ndarray):
    """Solve ``A x = b`` per entity; rows that fail come back as zeros with a flag."""
    ok = np.isfinite(A).all(axis=(1, 2)) & np.isfinite(b).all(axis=1)
    out = np.zeros_like(b)
    if ok.any():
        try:
            out[ok] = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
        except np.linalg.LinAlgError:
            for e in np.flatnonzero(ok):
                try:
                    out[e] = np.linalg.solve(A[e], b[e])
                except np.linalg.LinAlgError:
                    ok[e] = False
    ok &= np.isfinite(out).all(axis=1)
    out[~ok] = 0.0
    return out, ok


def batched_newton(
    Z: np.ndarray,
    x: np.ndarray,
    codes: np.ndarray,
    w: np.ndarray,
    beta0: np.ndarray,
    *,
    clamp: float,
    ridge: float = 1e-8,
    grad_tol: float = 1e-8,
    max_iter: int = 50,
    max_halvings: int = 30,
    ZZ: np.ndarray | None = None,
    hess=None,
) -> NewtonResult:
    """Maximise every entity's objective by damped Newton steps.

    ``hess``, when given, maps weighted second derivatives ``(n, m)`` to
    Hessians ``(n, k, k)`` and replaces the generic ``ZZ`` product.
    """
    n, k = beta0.shape
    if hess is None:
        if ZZ is None:
            ZZ = outer_rows(Z)

        def hess(d2rows):
            return (d2rows @ ZZ).reshape(-1, k, k)

    beta = np.array(beta0, dtype=float, copy=True)
    eye = np.eye(k)

    ll, d1, d2 = kernels.clamped_terms(codes, x, beta @ Z.T, clamp)
    obj = np.sum(w * ll, axis=1)
    d1w = w * d1
    d2w = w * d2
    active = np.ones(n, dtype=bool)
    stalled = np.zeros(n, dtype=bool)
    singular = np.zeros(n, dtype=bool)

    it = 0
    for it in range(1, max_iter + 1):
        score = d1w[active] @ Z
        idx = np.flatnonzero(active)
        keep = np.max(np.abs(score), axis=1) > grad_tol
        idx, score = idx[keep], score[keep]
        active[:] = False
        active[idx] = True
        if idx.size == 0:
            it -= 1
            break
        H = hess(d2w[idx])
        step, ok = _solve(ridge * eye - H, score)
        singular[idx[~ok]] = True
        idx, step = idx[ok], step[ok]
        active[:] = False
        if idx.size == 0:
            break

        t = 1.0
        pending = np.arange(idx.size)
        for _ in range(max_halvings + 1):
            e = idx[pending]
            cand = beta[e] + t * step[pending]
            ll_c, d1_c, d2_c = kernels.clamped_terms(codes[e], x[e], cand @ Z.T, clamp)
            new = np.sum(w[e] * ll_c, axis=1)
            good = np.isfinite(new) & (new >= obj[e] - 1e-12 * (1.0 + np.abs(obj[e])))
            if good.any():
                g = e[good]
                gain = new[good] - obj[g]
                beta[g] = cand[good]
                obj[g] = new[good]
                d1w[g] = w[g] * d1_c[good]
                d2w[g] = w[g] * d2_c[good]
                # keep iterating only where the objective still moves
                active[g] = gain > 1e-13 * (1.0 + np.abs(obj[g]))
            pending = pending[~good]
            if pending.size == 0:
                break
            t *= 0.5
        stalled[idx[pending]] = True
        if not active.any():
            break
    return NewtonResult(beta, obj, it, int(stalled.sum()), int(singular.sum()))
