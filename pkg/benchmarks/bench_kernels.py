"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--quick]
Prints one tab-separated row per kernel: name, python seconds, cython seconds, speedup.
"""

import argparse
import time

import numpy as np

from pmforest._backend import get_kernels
from pmforest.antisparse import pack_codes
from pmforest.partition import build_tree, _bound_scale
from pmforest.sparse_coding import lipschitz, random_dictionary


def _time(fn, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(quick: bool):
    rng = np.random.default_rng(0)
    N = 2000 if quick else 10000
    X = rng.standard_normal((N, 16))
    Q = rng.standard_normal((50 if quick else 200, 16))
    tree = build_tree(X, leaf_capacity=16)
    f = tree.flat()
    scale = _bound_scale(tree, 2.0)

    def knn(k):
        return lambda: k.tree_knn(tree.points, f["order"], f["axis"], f["normal"], f["offset"], scale,
                                  f["left"], f["right"], f["start"], f["end"], tree.root, Q, 10, 2.0)

    codes = pack_codes(np.where(rng.standard_normal((N * 10, 128)) >= 0, 1, -1))
    qc = np.ascontiguousarray(codes[:20])

    def hamming(k):
        return lambda: k.code_scores_batch(codes, qc, 128)

    D = random_dictionary(16, 64, 0)
    Y = np.ascontiguousarray(X[: (20 if quick else 100)])
    L = lipschitz(D)

    def ista(k):
        return lambda: k.ista_l1_batch(D.atoms, Y, 0.1, L, 5000, 1e-8, None)

    def mfista(k):
        return lambda: k.mfista_linf_batch(D.atoms, Y, 0.1, L, 5000, 1e-8, None)

    return [("tree_knn", knn), ("code_scores", hamming), ("ista_l1", ista), ("mfista_linf", mfista)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    py, cy = get_kernels("python"), get_kernels("cython")
    print("kernel\tpython_s\tcython_s\tspeedup")
    for name, make in cases(args.quick):
        tp = _time(make(py), repeat=1)
        tc = _time(make(cy))
        print(f"{name}\t{tp:.4f}\t{tc:.4f}\t{tp / tc:.1f}x")


if __name__ == "__main__":
    main()
