"""Command-line interface: ``gmfm {fit,select,simulate,bench,validate,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .evalsim.simulate import REPRO_SCALE
from .io import BundleError, read_bundle, read_fit, read_truth, write_bundle, write_fit, write_truth
from .report import FitError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("gmfm")


class InputError(Exception):
    pass


def _default_jobs() -> int:
    v = os.environ.get("GMFM_JOBS", "1")
    try:
        return max(1, int(v))
    except ValueError:
        return 1


# --- argument groups -------------------------------------------------------------


def _add_fit_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("fit options")
    g.add_argument("--algo", choices=["tsam", "mm"], default="tsam")
    g.add_argument("--restarts", type=int, default=5)
    g.add_argument("--max-outer", type=int, default=None, help="default 100 (tsam) or 500 (mm)")
    g.add_argument("--tol", type=float, default=1e-6, help="tsam: relative likelihood change")
    g.add_argument("--error-tol", type=float, default=1e-6, help="mm: likelihood increase")
    g.add_argument("--grad-tol", type=float, default=1e-8)
    g.add_argument("--inner-newton-iters", type=int, default=50)
    g.add_argument("--inner-als-sweeps", type=int, default=1)
    g.add_argument("--inner-exact", action="store_true", help="mm: solve each surrogate to convergence")
    g.add_argument("--pi-clamp", type=float, default=None)
    g.add_argument("--ridge", type=float, default=1e-8)
    g.add_argument("--index-sets", default="modal", help="modal, all, or prefer:<family>")
    g.add_argument("--no-correction", action="store_true", help="tsam: skip the one-step correction")
    g.add_argument("--warm-start", action="store_true", help="tsam: start from the linear baseline")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jobs", type=int, default=_default_jobs(), help="workers (default $GMFM_JOBS or 1)")


def _fit_options(args) -> dict:
    if args.algo == "tsam":
        opts = dict(
            restarts=args.restarts, tol=args.tol, grad_tol=args.grad_tol,
            inner_newton_iters=args.inner_newton_iters, pi_clamp=args.pi_clamp, ridge=args.ridge,
            seed=args.seed, index_sets=args.index_sets, correction=not args.no_correction,
            warm_start=args.warm_start, jobs=args.jobs,
        )
    else:
        opts = dict(
            restarts=args.restarts, error_tol=args.error_tol, inner_als_sweeps=args.inner_als_sweeps,
            inner_exact=args.inner_exact, pi_clamp=args.pi_clamp, seed=args.seed, jobs=args.jobs,
        )
    if args.max_outer is not None:
        opts["max_outer"] = args.max_outer
    return opts


def _load(path):
    try:
        return read_bundle(path)
    except BundleError as exc:
        raise InputError(str(exc)) from exc


# --- subcommands -------------------------------------------------------------------


def cmd_fit(args) -> int:
    from .evalsim.bench import fit_gmfm

    X, fmap, _ = _load(args.data)
    if args.k1 > X.p1 or args.k2 > X.p2:
        raise InputError(f"--k1/--k2 ({args.k1}, {args.k2}) exceed the data dims ({X.p1}, {X.p2})")
    opts = _fit_options(args)
    theta, report = fit_gmfm(X, fmap, args.k1, args.k2, args.algo, opts)
    variances = None
    if args.with_se:
        from .inference import sandwich_all

        try:
            variances = {kind: sandwich_all(X, fmap, theta, kind) for kind in ("row", "col", "factor")}
        except np.linalg.LinAlgError as exc:
            report.warn(f"standard errors unavailable: {exc}")
    write_fit(args.out, theta, report, variances)
    best = next(r for r in report.restarts if r.restart == report.best_restart)
    resid = report.residuals_after or {}
    print(
        f"loglik={report.loglik:.6f} iters={best.iterations} converged={report.converged} "
        f"max_residual={resid.get('max_residual', float('nan')):.2e} out={args.out}"
    )
    for w in report.warnings:
        log.warning(w)
    return EXIT_OK


def cmd_select(args) -> int:
    from .selection import SelectionGrid, select_factor_numbers

    X, fmap, _ = _load(args.data)
    try:
        grid = SelectionGrid(args.max_k1, args.max_k2)
        grid.check(X.p1, X.p2)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    opts = _fit_options(args)
    opts.pop("jobs", None)
    res = select_factor_numbers(X, fmap, grid, args.algo, opts, warm_grid=args.warm_grid, jobs=args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["l1", "l2", "negloglik_scaled", "penalty", "criterion"])
        for r in res.table:
            w.writerow([r.l1, r.l2, repr(r.negloglik_scaled), repr(r.penalty), repr(r.criterion)])
    for msg in res.warnings:
        log.warning(msg)
    print(f"k1={res.k1} k2={res.k2}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .evalsim.simulate import SimulationSpec, simulate_case

    try:
        spec = SimulationSpec(args.case, args.p1, args.p2, args.T, args.seed, args.innovation_scale)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    data = simulate_case(spec)
    k1, k2 = spec.k
    write_bundle(args.out, data.X, data.fmap, {"k1": k1, "k2": k2, "case": spec.case, "seed": spec.seed})
    write_truth(
        Path(args.out) / "truth.json",
        data.theta0,
        {"case": spec.case, "seed": spec.seed, "innovation_scale": spec.innovation_scale},
    )
    print(f"wrote {args.out} ({data.X.T * data.X.p1 * data.X.p2} cells, case={spec.case}, k=({k1},{k2}))")
    return EXIT_OK


def _parse_dims(text: str) -> tuple[int, int, int]:
    try:
        p1, p2, T = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise InputError(f"--dims entries must look like 20x20x30 (p1xp2xT), got {text!r}") from exc
    return p1, p2, T


def cmd_bench(args) -> int:
    from .evalsim.bench import BENCH_COLUMNS, run_bench, summarize
    from .evalsim.simulate import SimulationSpec, parse_case

    try:
        cases = [parse_case(c) for c in args.cases.split(",") if c.strip()]
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    dims = [_parse_dims(d) for d in args.dims.split(",")]
    for c in cases:
        for d in dims:
            try:
                SimulationSpec(c, *d, innovation_scale=args.innovation_scale)
            except ValueError as exc:
                raise InputError(str(exc)) from exc
    opts = _fit_options(args)
    opts.pop("seed")
    opts["jobs"] = 1
    rows = run_bench(cases, dims, args.reps, args.seed, args.algo, opts, args.innovation_scale, args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r.to_dict())
    for s in summarize(rows):
        print(
            f"{s['case']} {s['p1']}x{s['p2']}x{s['T']} {s['method']:<11} reps={s['reps']} "
            f"ccorR={s['ccorR']:.4f} ccorC={s['ccorC']:.4f}"
        )
    return EXIT_OK


def cmd_validate(args) -> int:
    from .evalsim.rolling import rolling_validate

    if args.data:
        X, fmap, _ = _load(args.data)
    else:
        from .evalsim.simulate import SimulationSpec, simulate_case

        T = (args.window + args.periods) * args.quarters
        try:
            spec = SimulationSpec(args.case, args.p1, args.p2, T, args.seed, args.innovation_scale)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        data = simulate_case(spec)
        X, fmap = data.X, data.fmap
    k1 = args.k1 if args.k1 is not None else args.k
    k2 = args.k2 if args.k2 is not None else args.k
    if k1 is None or k2 is None:
        raise InputError("give --k or both --k1 and --k2")
    opts = _fit_options(args) if args.algo != "alpha_pca" else {}
    try:
        res = rolling_validate(X, fmap, args.window, args.quarters, k1, k2, args.algo, opts)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    doc = {"algo": args.algo, "k1": k1, "k2": k2, "window": args.window, "quarters": args.quarters, **res.to_dict()}
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    print(f"periods={len(res.periods)} mse_bar={res.mse_bar:.6g} rho_bar={res.rho_bar:.6g}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    from .evalsim.metrics import ccor
    from .model import total_loglik

    try:
        theta, report, doc = read_fit(args.fit)
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read {args.fit}: {exc}") from exc
    out = {
        "algorithm": report.algorithm,
        "k1": theta.k1,
        "k2": theta.k2,
        "loglik": report.loglik,
        "converged": report.converged,
        "best_restart": report.best_restart,
        "warnings": report.warnings,
    }
    if args.data:
        X, fmap, _ = _load(args.data)
        out["loglik_recomputed"] = total_loglik(X, fmap, theta)
    if args.truth:
        try:
            theta0, _ = read_truth(args.truth)
        except (OSError, KeyError, ValueError) as exc:
            raise InputError(f"cannot read {args.truth}: {exc}") from exc
        out["ccorR"] = ccor(theta.R, theta0.R)
        out["ccorC"] = ccor(theta.C, theta0.C)
    print(json.dumps(out, indent=2))
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmfm", description="Generalized matrix factor models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model with given factor numbers")
    p.add_argument("--data", required=True, help="bundle directory (meta.json + data.csv)")
    p.add_argument("--k1", type=int, required=True)
    p.add_argument("--k2", type=int, required=True)
    p.add_argument("--with-se", action="store_true", help="add sandwich variance blocks")
    p.add_argument("--out", default="fit.json")
    _add_fit_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="choose (k1, k2) with the information criterion")
    p.add_argument("--data", required=True)
    p.add_argument("--max-k1", type=int, default=8)
    p.add_argument("--max-k2", type=int, default=8)
    p.add_argument("--warm-grid", action="store_true", help="start each cell from the previous one")
    p.add_argument("--out", default="criterion.csv")
    _add_fit_options(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="write a simulated bundle plus truth.json")
    p.add_argument("--case", required=True, help="1-6 or dgp1-dgp3")
    p.add_argument("--p1", type=int, required=True)
    p.add_argument("--p2", type=int, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--innovation-scale", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="Monte Carlo comparison against the linear baseline")
    p.add_argument("--cases", required=True, help="comma separated, e.g. 1,3")
    p.add_argument("--dims", default="20x20x30", help="comma separated p1xp2xT")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--innovation-scale", type=float, default=0.2)
    p.add_argument("--out", default="bench.csv")
    _add_fit_options(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="rolling validation on a bundle or a synthetic stream")
    p.add_argument("--data", default=None, help="bundle directory; omit for a synthetic stream")
    p.add_argument("--window", type=int, required=True, help="training window in periods")
    p.add_argument("--quarters", type=int, default=4, help="slices per period")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--k1", type=int, default=None)
    p.add_argument("--k2", type=int, default=None)
    p.add_argument("--case", default="1", help="synthetic stream design")
    p.add_argument("--p1", type=int, default=20)
    p.add_argument("--p2", type=int, default=20)
    p.add_argument("--periods", type=int, default=20, help="synthetic evaluation periods")
    p.add_argument("--innovation-scale", type=float, default=REPRO_SCALE)
    p.add_argument("--out", default=None)
    _add_fit_options(p)
    p.set_defaults(func=cmd_validate)
    for action in p._actions:
        if action.dest == "algo":
            action.choices = ["tsam", "mm", "alpha_pca"]

    p = sub.add_parser("report", help="summarise a fit.json")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", default=None, help="recompute the likelihood on this bundle")
    p.add_argument("--truth", default=None, help="truth.json for canonical correlations")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
