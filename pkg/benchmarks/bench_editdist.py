"""Compiled vs pure-Python edit-distance kernel on WER-sized inputs.

    python benchmarks/bench_editdist.py [--pairs 2000] [--max-len 40]
"""
import argparse
import time

import numpy as np

from jamt import _editdist_py


def bench(fn, pairs, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for r, h in pairs:
            fn(r, h)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--max-len", type=int, default=40)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    pairs = [(rng.integers(0, 50, size=rng.integers(1, args.max_len + 1)).tolist(),
              rng.integers(0, 50, size=rng.integers(0, args.max_len + 1)).tolist())
             for _ in range(args.pairs)]
    py = bench(_editdist_py.align_counts, pairs, args.repeat)
    print(f"python    {py * 1e3:9.1f} ms  ({args.pairs} pairs, len <= {args.max_len})")
    try:
        from jamt import _editdist
    except ImportError:
        print("compiled  not built (run: python setup.py build_ext --inplace)")
        return
    for r, h in pairs[:200]:
        assert _editdist.align_counts(r, h) == _editdist_py.align_counts(r, h)
    c = bench(_editdist.align_counts, pairs, args.repeat)
    print(f"compiled  {c * 1e3:9.1f} ms  speedup {py / c:.1f}x")


if __name__ == "__main__":
    main()
