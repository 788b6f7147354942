"""Monte Carlo comparison of the likelihood estimator against the linear baseline."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

from .. import rng as rngmod
from .baseline import alpha_pca_fit
from .metrics import ccor
from .simulate import AR_SCALE, SimulationSpec, simulate_case

BENCH_COLUMNS = ["case", "p1", "p2", "T", "rep", "method", "ccorR", "ccorC", "seconds"]


@dataclass
class BenchRow:
    case: str
    p1: int
    p2: int
    T: int
    rep: int
    method: str
    ccorR: float
    ccorC: float
    seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


def fit_gmfm(X, fmap, k1: int, k2: int, algo: str = "tsam", options: dict | None = None):
    options = dict(options or {})
    if algo == "tsam":
        from ..tsam import TsamConfig, tsam_fit

        return tsam_fit(X, fmap, TsamConfig(k1, k2, **options))
    if algo == "mm":
        from ..mm import MmConfig, mm_fit

        return mm_fit(X, fmap, MmConfig(k1, k2, **options))
    raise ValueError(f"unknown algorithm {algo!r}")


def rep_seed(seed: int, case: str, p1: int, p2: int, T: int, rep: int) -> int:
    return rngmod.derive_seed(seed, "bench", case, p1, p2, T, rep)


def bench_one(
    case: str,
    p1: int,
    p2: int,
    T: int,
    rep: int,
    seed: int = 0,
    algo: str = "tsam",
    options: dict | None = None,
    innovation_scale: float = AR_SCALE,
    baseline: bool = True,
) -> list[BenchRow]:
    """One replication: simulate, fit both estimators, score the loadings."""
    s = rep_seed(seed, case, p1, p2, T, rep)
    spec = SimulationSpec(case, p1, p2, T, seed=s, innovation_scale=innovation_scale)
    data = simulate_case(spec)
    k1, k2 = spec.k
    opts = dict(options or {})
    opts.setdefault("seed", s)
    rows = []
    t0 = time.perf_counter()
    theta, _ = fit_gmfm(data.X, data.fmap, k1, k2, algo, opts)
    dt = time.perf_counter() - t0
    rows.append(
        BenchRow(spec.case, p1, p2, T, rep, f"gmfm-{algo}", ccor(theta.R, data.theta0.R), ccor(theta.C, data.theta0.C), dt)
    )
    if baseline:
        t0 = time.perf_counter()
        base = alpha_pca_fit(data.X, k1, k2)
        dt = time.perf_counter() - t0
        rows.append(
            BenchRow(spec.case, p1, p2, T, rep, "alpha-pca", ccor(base.R, data.theta0.R), ccor(base.C, data.theta0.C), dt)
        )
    return rows


def run_bench(
    cases,
    dims,
    reps: int,
    seed: int = 0,
    algo: str = "tsam",
    options: dict | None = None,
    innovation_scale: float = AR_SCALE,
    jobs: int = 1,
) -> list[BenchRow]:
    """Rows ordered by (case, dims, rep, method) regardless of ``jobs``."""
    tasks = [(c, *d, r) for c in cases for d in dims for r in range(1, reps + 1)]

    def one(task):
        c, p1, p2, T, r = task
        return bench_one(c, p1, p2, T, r, seed, algo, options, innovation_scale)

    if jobs == 1:
        out = [one(t) for t in tasks]
    else:
        from joblib import Parallel, delayed

        out = Parallel(n_jobs=jobs)(delayed(one)(t) for t in tasks)
    return [row for rows in out for row in rows]


def summarize(rows: list[BenchRow]) -> list[dict]:
    """Mean ccor per (case, dims, method)."""
    groups: dict[tuple, list[BenchRow]] = {}
    for r in rows:
        groups.setdefault((r.case, r.p1, r.p2, r.T, r.method), []).append(r)
    out = []
    for (case, p1, p2, T, method), rs in groups.items():
        n = len(rs)
        out.append(
            {
                "case": case, "p1": p1, "p2": p2, "T": T, "method": method, "reps": n,
                "ccorR": sum(r.ccorR for r in rs) / n,
                "ccorC": sum(r.ccorC for r in rs) / n,
                "seconds": sum(r.seconds for r in rs) / n,
            }
        )
    return out
