"""Compare the compiled and numpy per-cell kernels.

Usage::

    python3 benchmarks/bench_kernels.py [--cells 1000000] [--repeat 5]

Prints the best wall time of each backend per family layout, the speedup,
and the largest absolute difference between the two outputs.
"""

import argparse
import timeit

import numpy as np

from gmfm import kernels
from gmfm.families import FamilyKind, sample_array

LAYOUTS = {
    "gaussian": [FamilyKind.GAUSSIAN],
    "poisson": [FamilyKind.POISSON],
    "logit": [FamilyKind.LOGIT],
    "probit": [FamilyKind.PROBIT],
    "tobit": [FamilyKind.TOBIT],
    "mixed": list(FamilyKind),
}


def make_inputs(fams, n, seed=0):
    rng = np.random.default_rng(seed)
    codes = rng.choice(np.array([int(f) for f in fams], dtype=np.int8), size=n)
    pi = rng.uniform(-3, 3, n)
    x = sample_array(codes, pi, rng, 1.0)
    return codes, x, pi


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    impls = kernels.implementations()
    if "cython" not in impls:
        print("compiled extension not built; only the numpy backend is available")
    print(f"default backend: {kernels.BACKEND}; cells per call: {args.cells}")
    print(f"{'layout':<9} " + " ".join(f"{name + ' ms':>10}" for name in impls) + "   speedup   max|diff|")
    for name, fams in LAYOUTS.items():
        codes, x, pi = make_inputs(fams, args.cells)
        times, outs = {}, {}
        for impl_name, impl in impls.items():
            fn = lambda impl=impl: kernels.cell_terms(codes, x, pi, impl=impl)  # noqa: E731
            times[impl_name] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
            outs[impl_name] = np.stack(fn())
        row = " ".join(f"{times[k]:10.2f}" for k in impls)
        if len(impls) == 2:
            speed = times["python"] / times["cython"]
            diff = float(np.max(np.abs(outs["python"] - outs["cython"])))
            print(f"{name:<9} {row}   {speed:7.2f}x   {diff:.2e}")
        else:
            print(f"{name:<9} {row}")


if __name__ == "__main__":
    main()
