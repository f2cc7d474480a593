"""Time the Gaussian kernel sum on each available backend.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--sizes 100,500,1000]

Prints one line per (backend, size) with the best wall-clock time and the
largest absolute difference from the pure-Python result.
"""
import argparse
import time

import numpy as np

from dagaf.kernels import backends


def best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--sizes", default="100,500,1000")
    ap.add_argument("--d", type=int, default=10)
    args = ap.parse_args(argv)
    mods = backends()
    rng = np.random.default_rng(0)
    print(f"{'backend':<8} {'n':>6} {'value s':>10} {'grad s':>10} {'max |diff|':>12}")
    for n in (int(s) for s in args.sizes.split(",")):
        a, b = rng.normal(size=(2, n, args.d))
        gamma = 1.0 / (2 * args.d)
        ref = None
        for name in ("python", "cython"):
            if name not in mods:
                print(f"{name:<8} {n:>6} {'n/a':>10}")
                continue
            k = mods[name].gaussian_kernel_sum
            tv, _ = best_time(lambda: k(a, b, gamma), args.repeats)
            tg, out = best_time(lambda: k(a, b, gamma, grad_a=True, grad_b=True), args.repeats)
            flat = np.concatenate([np.ravel(np.asarray(o, dtype=float)) for o in out])
            ref = flat if ref is None else ref
            print(f"{name:<8} {n:>6} {tv:>10.4f} {tg:>10.4f} {np.abs(flat - ref).max():>12.3e}")


if __name__ == "__main__":
    main()
