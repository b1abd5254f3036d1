"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every subcommand
accepts ``--config FILE`` with ``key = value`` lines (keys are the long flag
names with dashes or underscores); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import __version__
from .antisparse import ann_query, build_ann_index, calibrate_lambda, code_similarity_spearman
from .datasets import KINDS, DatasetSpec, generate, read_vectors, write_vectors
from .metrics import BenchResult, auc, brute_force_knn, recall_at_k
from .novelty import continual_loop, fit_novelty_model, novelty_score, write_escape_log
from .partition import AXIS, RP, build_tree, nn_exact_batch, xor_decompose
from .persistence import IndexBundle, load_index, save_index
from .product_index import build_pm_forest, forest_knn
from .sparse_coding import Dictionary, random_dictionary

XOR_POINTS = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
XOR_LABELS = np.array([0, 1, 1, 0])


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    cfg = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg[key.replace("-", "_")] = value
    return cfg


def _params(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = tuple(v.split(",")) if k == "factors" else (int(v) if v.lstrip("-").isdigit() else
                                                              (float(v) if _is_float(v) else v))
    return out


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _spec(args, n_points=None, seed=None) -> DatasetSpec:
    return DatasetSpec(args.kind, int(n_points if n_points is not None else args.n),
                       None if args.dim is None else int(args.dim), float(args.noise),
                       int(args.seed if seed is None else seed), _params(args.param))


def _add_dataset_args(p):
    p.add_argument("--kind", choices=KINDS, default="Torus")
    p.add_argument("--n", type=int, default=1000, help="number of points")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", action="append", default=None, metavar="KEY=VALUE",
                   help="generator parameter (n_clusters, center_scale, factors, path)")


def _dictionary(source: str, n: int, atoms: int | None, seed: int) -> Dictionary:
    if source == "random":
        return random_dictionary(n, atoms or 4 * n, seed)
    if source == "identity":
        return Dictionary(np.eye(n))
    if source.startswith("file:"):
        return Dictionary.from_columns(read_vectors(source[5:]).T)
    raise UsageError(f"unknown dictionary source {source!r} (random, identity, file:PATH)")


def _lam(value, D, X, seed) -> float:
    if str(value) == "auto":
        sample = X[make_sample(X.shape[0], 1000, seed)]
        return calibrate_lambda(D, sample, seed=seed)[0]
    return float(value)


def make_sample(n: int, size: int, seed: int) -> np.ndarray:
    if n <= size:
        return np.arange(n)
    return np.sort(np.random.Generator(np.random.PCG64(seed)).choice(n, size, replace=False))


# -- subcommands ---------------------------------------------------------------

def cmd_gen(args):
    ds = generate(_spec(args))
    write_vectors(args.out, ds.points)
    if args.labels_out:
        if ds.labels is None:
            raise UsageError(f"{args.kind} has no labels")
        np.savetxt(args.labels_out, ds.labels, fmt="%d")
    print(f"wrote {ds.points.shape[0]} x {ds.points.shape[1]} to {args.out}")


def cmd_build(args):
    X = read_vectors(args.data)
    if X.shape[0] == 0:
        raise ValueError(f"{args.data} holds no vectors")
    forest = build_pm_forest(X, num_trees=args.trees, seed=args.seed, block_width=args.block_width,
                             rule=args.rule, leaf_capacity=args.leaf_capacity)
    ann = None
    meta = {"rule": args.rule, "leaf_capacity": int(args.leaf_capacity), "seed": int(args.seed)}
    if not args.no_ann:
        D = _dictionary(args.dict, X.shape[1], args.atoms, args.seed)
        lam = _lam(args.lam, D, X, args.seed)
        ann = build_ann_index(D, X, lam)
        meta["lam"] = lam
    nov = None
    if args.novelty:
        nov = fit_novelty_model(X, threshold_quantile=args.threshold_quantile, block_width=args.block_width,
                                rule=args.rule, seed=args.seed)
    save_index(args.out, IndexBundle(X, forest, ann, nov, meta))
    print(f"wrote index for {X.shape[0]} points to {args.out}")


def cmd_query(args):
    b = load_index(args.index)
    Q = read_vectors(args.queries)
    k = int(args.k)
    if args.method == "exact":
        tree = build_tree(b.points, rule=b.meta.get("rule", AXIS), leaf_capacity=b.meta.get("leaf_capacity", 16),
                          seed=b.meta.get("seed", 0))
        ids, _ = nn_exact_batch(tree, Q, k, args.metric)
    elif args.method == "forest":
        if b.forest is None:
            raise ValueError("index has no PM forest")
        ids = np.stack([forest_knn(b.forest, q, k, args.metric) for q in Q])
    else:
        if b.ann is None:
            raise ValueError("index has no ANN codes (built with --no-ann)")
        s = args.shortlist or max(k, int(np.ceil(0.02 * b.points.shape[0])))
        ids = np.stack([ann_query(b.ann, q, k, min(s, b.points.shape[0]), args.metric) for q in Q])
    text = "\n".join("\t".join(str(int(i)) for i in row) for row in ids) + "\n"
    _emit(text, args.out)


def _emit(text: str, path):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def outlier_box(X: np.ndarray, n: int, seed: int, margin: float = 0.25) -> np.ndarray:
    """Uniform samples from the bounding box of ``X`` enlarged by ``margin`` of its extent per side."""
    lo, hi = X.min(axis=0), X.max(axis=0)
    w = hi - lo
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.uniform(lo - margin * w, hi + margin * w, (n, X.shape[1]))


def cmd_bench(args):
    times = {}
    t0 = time.perf_counter()
    X = generate(_spec(args)).points
    Q = generate(_spec(args, n_points=args.queries, seed=args.seed + 1)).points
    times["generate"] = time.perf_counter() - t0
    ks = sorted({int(k) for k in str(args.k).split(",")})
    kmax = max(ks)
    if kmax > X.shape[0]:
        raise UsageError("k exceeds the number of points")

    t0 = time.perf_counter()
    oracle = np.stack([brute_force_knn(X, q, kmax) for q in Q])
    times["oracle"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    forest = build_pm_forest(X, num_trees=args.trees, seed=args.seed, block_width=args.block_width,
                             rule=args.rule, leaf_capacity=args.leaf_capacity)
    times["forest_build"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    fres = np.stack([forest_knn(forest, q, kmax) for q in Q])
    times["forest_query"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    D = _dictionary(args.dict, X.shape[1], args.atoms, args.seed)
    lam = _lam(args.lam, D, X, args.seed)
    ann = build_ann_index(D, X, lam)
    times["ann_build"] = time.perf_counter() - t0
    s = max(kmax, int(np.ceil(args.shortlist_frac * X.shape[0])))
    t0 = time.perf_counter()
    ares = np.stack([ann_query(ann, q, kmax, min(s, X.shape[0])) for q in Q])
    times["ann_query"] = time.perf_counter() - t0

    res = BenchResult()
    res.recall_at_k = {k: recall_at_k(ares[:, :k], oracle[:, :k]) for k in ks}
    res.forest_recall_at_k = {k: recall_at_k(fres[:, :k], oracle[:, :k]) for k in ks}
    res.spearman_code_vs_true = code_similarity_spearman(D, Q, lam, seed=args.seed)

    t0 = time.perf_counter()
    model = fit_novelty_model(X, block_width=args.block_width, rule=args.rule, seed=args.seed)
    out = outlier_box(X, Q.shape[0], args.seed + 2)
    si = [novelty_score(model, q).score for q in Q]
    so = [novelty_score(model, o).score for o in out]
    res.auc_novelty = auc(si, so)
    times["novelty"] = time.perf_counter() - t0
    res.wall_times = times if not args.no_times else {}
    _emit(res.to_tsv(), args.out)
    if args.plot_data:
        lines = ["query\tann_recall\tforest_recall"]
        for i in range(Q.shape[0]):
            a = recall_at_k(ares[i:i + 1, :kmax], oracle[i:i + 1])
            f = recall_at_k(fres[i:i + 1, :kmax], oracle[i:i + 1])
            lines.append(f"{i}\t{a:.6f}\t{f:.6f}")
        with open(args.plot_data, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def cmd_novelty(args):
    b = load_index(args.index)
    if b.novelty is None:
        raise ValueError("index has no novelty model (build with --novelty)")
    stream = read_vectors(args.stream)
    steps = continual_loop(b.novelty, stream)
    lines = ["i\tresidual\tcell_occupancy\tpercentile\tscore\tis_novel\tescaped\tpost_score"]
    events = []
    for i, st in enumerate(steps):
        r, ev = st.report, st.event
        post = ev.post_score if ev is not None else r.score
        lines.append(f"{i}\t{r.residual:.6g}\t{r.cell_occupancy}\t{r.percentile:.6f}\t{r.score:.6f}\t"
                     f"{int(r.is_novel)}\t{int(ev is not None and ev.escaped)}\t{post:.6f}")
        if ev is not None:
            events.append(ev)
    _emit("\n".join(lines) + "\n", args.out)
    if args.log:
        write_escape_log(events, args.log)
    if args.save:
        save_index(args.save, b)


def cmd_demo_xor(args):
    t0 = time.perf_counter()
    clf = xor_decompose(XOR_POINTS, XOR_LABELS)
    pred = [clf.predict(p) for p in XOR_POINTS]
    correct = sum(int(a == b) for a, b in zip(pred, XOR_LABELS))
    elapsed = time.perf_counter() - t0
    print("XOR as a difference of two half-spaces: label 1 iff inside OUTER and not inside INNER")
    for name, h in (("OUTER", clf.outer), ("INNER", clf.inner)):
        print(f"{name}: {np.array2string(h.normal, precision=4)} . x > {h.offset:.4f}")
    for p, y, yh in zip(XOR_POINTS, XOR_LABELS, pred):
        print(f"  x={p.tolist()}  label={y}  predicted={yh}")
    print(f"{correct}/4 correct in {elapsed:.3f} s")
    if correct != 4:
        raise RuntimeError("XOR decomposition misclassified a point")


def cmd_calibrate(args):
    X = read_vectors(args.data) if args.data else generate(_spec(args)).points
    D = _dictionary(args.dict, X.shape[1], args.atoms, args.seed)
    lams = [float(v) for v in str(args.lams).split(",")]
    sample = X[make_sample(X.shape[0], args.sample, args.seed)]
    best, results = calibrate_lambda(D, sample, lams, n_pairs=args.pairs, seed=args.seed)
    lines = ["lambda\tspearman"] + [f"{lam:g}\t{rho:.6f}" for lam, rho in results]
    lines.append(f"best\t{best:g}")
    _emit("\n".join(lines) + "\n", args.out)


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmforest", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pmforest {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="key = value file; flags win")
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a dataset file (.fvecs or .csv)")
    _add_dataset_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out", default=None)

    p = add("build", cmd_build, "build an index file from a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rule", choices=(AXIS, RP), default=AXIS)
    p.add_argument("--block-width", type=int, default=2)
    p.add_argument("--trees", type=int, default=4)
    p.add_argument("--leaf-capacity", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dict", default="random", help="random, identity or file:PATH (atoms as vectors)")
    p.add_argument("--atoms", type=int, default=None, help="atoms for a random dictionary (default 4n)")
    p.add_argument("--lam", default="auto", help="anti-sparse lambda, or 'auto' to calibrate")
    p.add_argument("--no-ann", action="store_true")
    p.add_argument("--novelty", action="store_true", help="also fit a novelty model")
    p.add_argument("--threshold-quantile", type=float, default=0.99)

    p = add("query", cmd_query, "k nearest neighbours for every query vector")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--method", choices=("exact", "forest", "ann"), default="exact")
    p.add_argument("--metric", default="l2", help="l2, l1 or lp:P")
    p.add_argument("--shortlist", type=int, default=None)
    p.add_argument("--out", default=None)

    p = add("bench", cmd_bench, "run the full pipeline against brute-force oracles")
    _add_dataset_args(p)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--k", default="1,10")
    p.add_argument("--rule", choices=(AXIS, RP), default=AXIS)
    p.add_argument("--block-width", type=int, default=2)
    p.add_argument("--trees", type=int, default=4)
    p.add_argument("--leaf-capacity", type=int, default=16)
    p.add_argument("--dict", default="random")
    p.add_argument("--atoms", type=int, default=None)
    p.add_argument("--lam", default="auto")
    p.add_argument("--shortlist-frac", type=float, default=0.02)
    p.add_argument("--no-times", action="store_true", help="omit wall-clock rows (byte-stable output)")
    p.add_argument("--out", default=None)
    p.add_argument("--plot-data", default=None, help="per-query recall table")

    p = add("novelty", cmd_novelty, "score a stream and escape novel samples")
    p.add_argument("--index", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--log", default=None, help="escape-event log (JSON lines)")
    p.add_argument("--save", default=None, help="write the updated index here")

    add("demo-xor", cmd_demo_xor, "decompose XOR into a difference of convex cells")

    p = add("calibrate-lambda", cmd_calibrate, "Spearman of code vs cosine similarity per lambda")
    _add_dataset_args(p)
    p.add_argument("--data", default=None, help="dataset file (otherwise generated)")
    p.add_argument("--dict", default="random")
    p.add_argument("--atoms", type=int, default=None)
    p.add_argument("--lams", default="0.01,0.03,0.1,0.3,1")
    p.add_argument("--sample", type=int, default=1000)
    p.add_argument("--pairs", type=int, default=2000)
    p.add_argument("--out", default=None)
    return parser


def _apply_config(parser, argv):
    """Re-parse with config values as defaults so explicit flags win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    cfg = read_config(args.config)
    sp = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sp._actions}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    typed = {}
    for a in sp._actions:
        if a.dest in cfg:
            v = cfg[a.dest]
            if a.type is not None:
                v = a.type(v)
            elif a.nargs == 0:
                v = v.lower() in ("1", "true", "yes", "on")
            elif a.dest == "param":
                v = v.split()
            typed[a.dest] = v
    sp.set_defaults(**typed)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as e:
        return int(e.code or 0)
    except (UsageError, ValueError, OSError) as e:
        print(f"pmforest: usage error: {e}", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except UsageError as e:
        print(f"pmforest: usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and exit nonzero
        print(f"pmforest: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
