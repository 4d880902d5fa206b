"""Time the compiled core against the numpy fallback.

    python3 benchmarks/bench_backends.py --sizes 1024,4096,16384 --repeat 3

Each phase is timed on both backends for the same points and kernel.
Results go to stdout and, with ``--csv``, to a file.
"""
import argparse
import csv
import sys
import time

import numpy as np

from hodlrgp import _backend
from hodlrgp.hodlr import assemble, factorize
from hodlrgp.kernels import KernelParams
from hodlrgp.sampler import GridPrecomp, sample_f


def best_of(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def phases(n, backend, repeat, eps, leaf):
    rng = np.random.default_rng(n)
    X = np.sort(rng.uniform(0.0, 1.0, n))[:, None]
    p = KernelParams(1.0, 10.0, 1e-8)
    v = rng.standard_normal(n)
    t_asm, H = best_of(lambda: assemble(X, p, eps, leaf, backend=backend), repeat)
    t_fac, F = best_of(lambda: factorize(H), repeat)
    t_mv, _ = best_of(lambda: H @ v, repeat)
    t_sol, _ = best_of(lambda: F.solve(v), repeat)
    entry = GridPrecomp(X, [10.0], eps, leaf, 1e-8, backend)[0]
    y = np.sin(6 * X[:, 0])
    t_draw, _ = best_of(lambda: sample_f(y, p, 4.0, entry, rng=np.random.default_rng(0)),
                        repeat)
    return {"assemble": t_asm, "factorize": t_fac, "matvec": t_mv,
            "solve": t_sol, "sample_f": t_draw}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="1024,4096,16384",
                    type=lambda s: [int(v) for v in s.split(",")])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--eps", type=float, default=1e-10)
    ap.add_argument("-B", "--leaf-size", type=int, default=64)
    ap.add_argument("--csv", help="also write rows to this file")
    args = ap.parse_args(argv)

    try:
        _backend.get("compiled")
    except ImportError:
        print("compiled core is not built; run `python3 setup.py build_ext --inplace`",
              file=sys.stderr)
        return 1

    rows = []
    print(f"{'n':>7} {'phase':>10} {'compiled':>11} {'python':>11} {'speedup':>8}")
    for n in args.sizes:
        tc = phases(n, "compiled", args.repeat, args.eps, args.leaf_size)
        tp = phases(n, "python", args.repeat, args.eps, args.leaf_size)
        for ph in tc:
            rows.append((n, ph, tc[ph], tp[ph]))
            print(f"{n:>7} {ph:>10} {tc[ph]:>10.4f}s {tp[ph]:>10.4f}s "
                  f"{tp[ph] / tc[ph]:>7.1f}x", flush=True)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "phase", "compiled_s", "python_s"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
