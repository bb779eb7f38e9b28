"""Time the compiled Jacobi eigensolver against the numpy fallback.

    python benchmarks/bench_kernels.py [--batch 512 2048 10000] [--n 2 4] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from nidapbc import linalg


def random_sym(B, n, seed=0):
    A = np.random.default_rng(seed).normal(size=(B, n, n))
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, nargs="+", default=[512, 2048, 10000])
    ap.add_argument("--n", type=int, nargs="+", default=[2, 4])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    impls = {"numpy": linalg.jacobi_eigh_numpy}
    if linalg.jacobi_eigh_compiled is not None:
        impls["compiled"] = linalg.jacobi_eigh_compiled
    else:
        print("compiled extension not built; timing the numpy fallback only")

    print(f"{'n':>3} {'batch':>7} " + " ".join(f"{k + ' ms':>13}" for k in impls) + f" {'speedup':>9} {'max |dw|':>10}")
    for n in args.n:
        for B in args.batch:
            A = random_sym(B, n)
            times, vals = {}, {}
            for name, fn in impls.items():
                vals[name] = fn(A, linalg.JACOBI_TOL)[0]
                times[name] = 1e3 * min(timeit.repeat(lambda: fn(A, linalg.JACOBI_TOL), number=1, repeat=args.repeat))
            speed = times["numpy"] / times["compiled"] if "compiled" in times else float("nan")
            dw = np.abs(vals["numpy"] - vals["compiled"]).max() if "compiled" in vals else float("nan")
            row = " ".join(f"{times[k]:13.3f}" for k in impls)
            print(f"{n:3d} {B:7d} {row} {speed:9.1f} {dw:10.2e}")


if __name__ == "__main__":
    main()
