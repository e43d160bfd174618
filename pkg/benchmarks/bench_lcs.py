"""Compare the numba and numpy LCS kernels, plus ROUGE-L end to end.

    python benchmarks/bench_lcs.py [--sizes 30 100 300 1000] [--repeat 20]

The numba number excludes JIT compilation (one warm-up call first).
"""
import argparse
import timeit

import numpy as np

from promptrl import _kernels


def bench(fn, a, b, repeat):
    fn(a, b)
    return min(timeit.repeat(lambda: fn(a, b), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", type=int, nargs="+", default=[30, 100, 300, 1000])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--vocab", type=int, default=50)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"active backend: {_kernels.BACKEND}")
    print(f"{'n':>6} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for n in args.sizes:
        a = rng.integers(0, args.vocab, n).astype(np.int64)
        b = rng.integers(0, args.vocab, n).astype(np.int64)
        t_np = bench(_kernels.lcs_length_numpy, a, b, args.repeat)
        if _kernels.lcs_length_numba is not None:
            assert _kernels.lcs_length_numpy(a, b) == _kernels.lcs_length_numba(a, b)
            t_nb = bench(_kernels.lcs_length_numba, a, b, args.repeat)
            print(f"{n:>6} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.1f}x")
        else:
            print(f"{n:>6} {1e3 * t_np:>10.3f} {'n/a':>10} {'':>8}")


if __name__ == "__main__":
    main()
