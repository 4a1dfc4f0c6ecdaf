"""Time the numba kernels against the numpy fallback on dispatch-sized inputs.

Usage: python3 benchmarks/bench_kernels.py [--rows N] [--width H] [--repeat R] [--csv-out PATH]
"""

from __future__ import annotations

import argparse
import csv
import sys
import timeit

import numpy as np

from moeroute._kernels import numba_kernels, numpy_kernels


def cases(rows: int, width: int, num_experts: int, seed: int):
    rng = np.random.default_rng(seed)
    S = rows // 8
    src = rng.normal(size=(S, width))
    idx = rng.integers(0, S, size=rows)
    buf = rng.normal(size=(rows, width))
    weights = rng.random(rows)
    experts = rng.integers(0, num_experts, size=rows)
    nodes = rng.integers(-1, 16, size=(rows // 8, 8))
    return {
        "gather_rows": lambda k: k.gather_rows(src, idx),
        "scatter_add_rows": lambda k: k.scatter_add_rows(np.zeros((S, width)), buf, idx,
                                                         weights),
        "count_distinct_per_row": lambda k: k.count_distinct_per_row(nodes),
        "capacity_keep": lambda k: k.capacity_keep(experts, num_experts, rows // num_experts),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=65536)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--experts", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv-out")
    args = p.parse_args(argv)
    if numba_kernels is None:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1

    rows = []
    for name, fn in cases(args.rows, args.width, args.experts, args.seed).items():
        a, b = fn(numpy_kernels), fn(numba_kernels)   # also triggers compilation
        if not np.array_equal(a, b):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 2
        t_np = min(timeit.repeat(lambda: fn(numpy_kernels), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fn(numba_kernels), number=1, repeat=args.repeat))
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb,
                     "speedup": t_np / t_nb if t_nb else float("inf")})

    print(f"{'kernel':<24}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['kernel']:<24}{r['numpy_s'] * 1e3:>12.3f}{r['numba_s'] * 1e3:>12.3f}"
              f"{r['speedup']:>9.2f}x")
    if args.csv_out:
        with open(args.csv_out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
