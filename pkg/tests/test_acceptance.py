"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) and then
asserts, so a failing criterion stays red.
"""

import io
import itertools
import time
from contextlib import redirect_stdout

import numpy as np
import pytest
from scipy.optimize import lsq_linear, minimize_scalar

from pmforest import product_index as pi
from pmforest.antisparse import (ann_query, antisparse_encode, binarize, build_ann_index, build_product_ann,
                                 calibrate_lambda, code_inner, code_similarity_spearman, linf_encode_exact,
                                 pack_codes, product_ann_query)
from pmforest.cli import main, outlier_box
from pmforest.datasets import DatasetSpec, generate
from pmforest.metrics import auc, brute_force_knn, recall_at_k
from pmforest.novelty import continual_loop, escape_insert, fit_novelty_model, novelty_score
from pmforest.numerics import project_l1_ball, prox_linf
from pmforest.partition import build_tree, nn_exact_batch
from pmforest.persistence import IndexBundle, load_index, save_index
from pmforest.product_index import BlockPartition, build_pm_forest, build_pm_tree, intersect_candidates
from pmforest.sparse_coding import (MLCSCStack, basis_pursuit, compose_direct_sum, compose_product_atoms,
                                    hierarchical_csc_encode, incoherent_dictionary, ml_csc_forward,
                                    ml_csc_reconstruct, orthonormal_dictionary, random_dictionary)

pytestmark = pytest.mark.slow


def test_01_xor_demo(acceptance):
    buf = io.StringIO()
    t0 = time.perf_counter()
    with redirect_stdout(buf):
        code = main(["demo-xor"])
    elapsed = time.perf_counter() - t0
    ok = code == 0 and "4/4 correct" in buf.getvalue() and elapsed < 1.0
    acceptance(1, ok, f"demo-xor exit {code}, 4/4 correct, {elapsed:.3f} s (< 1 s)")
    assert ok


def test_02_exact_nn_equivalence(acceptance):
    r = np.random.default_rng(2)
    t0 = time.perf_counter()
    agree, total = 0, 0
    for d in (8, 32):
        X = r.standard_normal((5000, d))
        Q = r.standard_normal((1000, d))
        tree = build_tree(X, leaf_capacity=16, seed=0)
        for metric in ("l2", "lp:0.5"):
            oracle = np.stack([brute_force_knn(X, q, 10, metric) for q in Q])
            for k in (1, 10):
                ids, _ = nn_exact_batch(tree, Q, k, metric)
                agree += int(np.sum(np.all(ids == oracle[:, :k], axis=1)))
                total += Q.shape[0]
    elapsed = time.perf_counter() - t0
    ok = agree == total and elapsed < 30.0
    acceptance(2, ok, f"{agree}/{total} queries identical to brute force, {elapsed:.1f} s (< 30 s)")
    assert ok


def comembers(pm, q):
    """Brute force: ids whose every block slice routes to the query's leaf for that block."""
    keep = np.ones(pm.n_points, dtype=bool)
    for t, xs in zip(pm.subtrees, pm.block_slices(q)):
        leaf = t.route(xs)
        keep &= np.array([t.route(p) == leaf for p in t.points])
    return np.flatnonzero(keep)


def test_03_intersection_equals_comembership(acceptance):
    r = np.random.default_rng(3)
    equal = 0
    for inst in range(50):
        widths = [2, 2] if inst % 2 == 0 else [2, 1, 2]
        n = int(r.integers(200, 2001))
        X = r.standard_normal((n, sum(widths)))
        pm = build_pm_tree(X, BlockPartition.from_widths(widths), leaf_capacity=int(r.integers(8, 64)),
                           seed=inst, rule="axis" if inst % 3 else "rp")
        q = X[r.integers(n)] if inst % 4 == 0 else r.standard_normal(sum(widths))
        got = intersect_candidates(pm, q, min_candidates=0)
        equal += np.array_equal(np.sort(got), comembers(pm, q))
    ok = equal == 50
    acceptance(3, ok, f"{equal}/50 instances with exact set equality")
    assert ok


def test_04_bookkeeping(acceptance):
    r = np.random.default_rng(4)
    before = pi.bookkeeping_checks
    builds = 0
    for widths in ([1], [2, 2], [3, 1, 2], [1] * 6, [4, 4]):
        X = r.standard_normal((100, sum(widths)))
        pm = build_pm_tree(X, BlockPartition.from_widths(widths), seed=builds)
        assert pm.cell_dim == sum(widths)
        builds += 1
    forest = build_pm_forest(r.standard_normal((100, 6)), num_trees=4, seed=0, block_width=2)
    builds += len(forest.trees)
    checks = pi.bookkeeping_checks - before
    ok = checks >= builds
    acceptance(4, ok, f"{checks} checks over {builds} builds, none fired")
    assert ok


def test_05_ml_csc_round_trip(acceptance):
    stack = MLCSCStack(tuple(orthonormal_dictionary(16, s) for s in range(3)), (0.0, 0.0, 0.0))
    X = np.random.default_rng(5).standard_normal((100, 16))
    errs = [np.linalg.norm(ml_csc_reconstruct(stack, ml_csc_forward(stack, x)[-1].coefficients) - x) for x in X]
    ok = max(errs) <= 1e-10
    acceptance(5, ok, f"max reconstruction error {max(errs):.2e} (<= 1e-10) over 100 signals")
    assert ok


def best_subset(A, x, s):
    best, arg = np.inf, None
    for S in itertools.combinations(range(A.shape[1]), s):
        sub = A[:, S]
        res = np.linalg.norm(sub @ np.linalg.lstsq(sub, x, rcond=None)[0] - x)
        if res < best - 1e-12:
            best, arg = res, frozenset(S)
    return arg


def test_06_basis_pursuit_monotone_and_recovery(acceptance):
    r = np.random.default_rng(6)
    hits, monotone = 0, True
    for trial in range(200):
        D = incoherent_dictionary(8, 12, trial, coherence=0.3)
        g = np.zeros(12)
        S = r.choice(12, 2, replace=False)
        g[S] = r.choice([-1.0, 1.0], 2) * r.uniform(1.0, 2.0, 2)
        x = D.atoms @ g
        code = basis_pursuit(D, x, 0.05, record=True)
        monotone &= bool(np.all(np.diff(code.trace) <= 0))
        hits += code.support == best_subset(D.atoms, x, 2)
    ok = monotone and hits >= 180
    acceptance(6, ok, f"objective monotone on all runs: {monotone}; support matches best-subset oracle "
                      f"in {hits}/200 (>= 180)")
    assert ok


def test_07_product_atoms_sparsity_gain(acceptance):
    good = 0
    for seed in range(3):
        Dx, Dy = random_dictionary(4, 4, 10 + seed), random_dictionary(4, 4, 20 + seed)
        P, S = compose_product_atoms(Dx, Dy), compose_direct_sum(Dx, Dy)
        pair_ok = 0
        for k, (i, j) in enumerate(P.provenance):
            z = P.atoms.atoms[:, k]
            cp = hierarchical_csc_encode(z, P, 0.05)
            cs = hierarchical_csc_encode(z, S, 0.05)
            pair_ok += cp.nnz == 1 and cs.nnz == 2
        good += pair_ok == 16
    ok = good == 3
    acceptance(7, ok, f"16/16 pairs (1-sparse vs 2-sparse) on {good}/3 dictionary pairs")
    assert ok


def linf_vertex_oracle(A, x):
    # m = n + 1: the feasible set is a line a0 + s v; the optimum is where two |a_i(s)| meet
    a0 = np.linalg.lstsq(A, x, rcond=None)[0]
    v = np.linalg.svd(A)[2][-1]
    best = np.inf
    for i, j in itertools.combinations(range(A.shape[1]), 2):
        for sgn in (1.0, -1.0):
            den = v[i] - sgn * v[j]
            if abs(den) > 1e-14:
                s = -(a0[i] - sgn * a0[j]) / den
                best = min(best, np.abs(a0 + s * v).max())
    return best


def test_08_spread_saturation(acceptance):
    r = np.random.default_rng(8)
    parts, ok = [], True
    worst = 0.0
    for n, m in ((2, 3), (4, 8), (8, 16)):
        sat = 0
        for s in range(100):
            D = random_dictionary(n, m, 1000 * n + s)
            x = r.standard_normal(n)
            code = linf_encode_exact(D, x)
            assert np.linalg.norm(D.atoms @ code.alpha - x) <= 1e-8
            sat += len(code.saturated) >= m - n + 1
            if n == 2:
                worst = max(worst, abs(code.linf - linf_vertex_oracle(D.atoms, x)))
        parts.append(f"({n},{m}) {sat}/100")
        ok &= sat >= 95
    ok &= worst <= 1e-6
    acceptance(8, ok, f"saturated >= m-n+1: {', '.join(parts)} (>= 95); "
                      f"max |linf - oracle| at (2,3) {worst:.1e} (<= 1e-6)")
    assert ok


def penalized_grid_oracle(A, y, lam):
    """min over the l-infinity level t (grid, then refined) of a box-constrained least squares."""
    def f(t):
        if t <= 0.0:
            return 0.5 * float(y @ y)
        res = lsq_linear(A, y, bounds=(-t, t), tol=1e-14)
        return 0.5 * np.sum((A @ res.x - y) ** 2) + lam * t

    hi = np.abs(np.linalg.lstsq(A, y, rcond=None)[0]).max() + 1.0
    grid = np.linspace(0.0, hi, 401)
    vals = [f(t) for t in grid]
    i = int(np.argmin(vals))
    lo, up = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    return min(vals[i], minimize_scalar(f, bounds=(lo, up), method="bounded", options={"xatol": 1e-12}).fun)


def test_09_prox_and_penalized_objective(acceptance):
    r = np.random.default_rng(9)
    moreau = 0.0
    for _ in range(10_000):
        v = r.standard_normal(int(r.integers(1, 20))) * r.uniform(0.1, 10)
        lam = r.uniform(0.01, 5)
        moreau = max(moreau, np.abs(prox_linf(v, lam) + lam * project_l1_ball(v / lam, 1.0) - v).max())
    worst = 0.0
    for s in range(30):
        D = random_dictionary(2, 3, 900 + s)
        y = r.standard_normal(2)
        lam = r.uniform(0.05, 1.0)
        code = antisparse_encode(D, y, lam, max_iters=20000, tol=1e-14)
        worst = max(worst, abs(code.objective - penalized_grid_oracle(D.atoms, y, lam)))
    ok = moreau <= 1e-10 and worst <= 1e-4
    acceptance(9, ok, f"Moreau residual {moreau:.1e} (<= 1e-10); objective vs grid oracle {worst:.1e} (<= 1e-4)")
    assert ok


def test_10_negation_symmetry(acceptance):
    r = np.random.default_rng(10)
    D = random_dictionary(16, 64, 0)
    sym, nonzero = 0, 0
    for y in r.standard_normal((100, 16)):
        a = antisparse_encode(D, y, 0.1).alpha
        b = antisparse_encode(D, -y, 0.1).alpha
        nonzero += bool(np.all(a != 0.0))
        sym += np.array_equal(binarize(b), -binarize(a))
    ok = sym == 100 and nonzero == 100
    acceptance(10, ok, f"e(-y) == -e(y) on {sym}/100, no zero coefficients on {nonzero}/100")
    assert ok


@pytest.fixture(scope="module")
def gaussian_ann():
    r = np.random.default_rng(11)
    X = r.standard_normal((10_000, 16))
    Q = r.standard_normal((500, 16))
    D = random_dictionary(16, 64, 11)
    held_out = np.random.default_rng(111).standard_normal((1000, 16))
    lam, table = calibrate_lambda(D, held_out, n_pairs=2000, seed=0)
    index = build_ann_index(D, X, lam)
    return X, Q, D, lam, table, index


def test_11_ann_quality(acceptance, gaussian_ann):
    X, Q, D, lam, table, index = gaussian_ann
    rho = code_similarity_spearman(D, Q, lam, n_pairs=10_000, seed=1)
    oracle = np.array([brute_force_knn(X, q, 1) for q in Q])
    s = int(np.ceil(0.02 * X.shape[0]))
    got = np.array([ann_query(index, q, 1, s) for q in Q])
    recall = recall_at_k(got, oracle)
    # baseline: a random shortlist of the same size, then the same exact re-rank
    rr = np.random.default_rng(0)
    base = float(np.mean([o[0] in set(rr.choice(X.shape[0], s, replace=False).tolist()) for o in oracle]))
    full = recall_at_k(np.array([ann_query(index, q, 1, X.shape[0]) for q in Q[:100]]), oracle[:100])
    ok = rho >= 0.5 and recall >= 10 * 0.02 and full == 1.0
    acceptance(11, ok, f"lambda {lam:g}; Spearman {rho:.3f} (>= 0.5); recall@1 {recall:.3f} with 2% shortlist "
                       f"(>= 0.2, random-shortlist baseline {base:.3f}); full shortlist recall {full:.1f}")
    assert ok


def test_12_product_ann_additivity(acceptance):
    r = np.random.default_rng(12)
    widths = (40, 64, 90)
    exact = 0
    for _ in range(10_000):
        a = [r.choice(np.array([-1, 1], dtype=np.int8), w) for w in widths]
        b = [r.choice(np.array([-1, 1], dtype=np.int8), w) for w in widths]
        blocks = sum(int(code_inner(pack_codes(x[None]), pack_codes(y[None])[0], w)[0])
                     for x, y, w in zip(a, b, widths))
        ca, cb = np.concatenate(a), np.concatenate(b)
        exact += blocks == int(code_inner(pack_codes(ca[None]), pack_codes(cb[None])[0], ca.size)[0]) \
            == int(ca.astype(np.int64) @ cb)
    D = random_dictionary(8, 32, 12)
    X = r.standard_normal((2000, 8))
    flat = build_ann_index(D, X, 0.1)
    prod = build_product_ann(BlockPartition.from_widths([8]), X, [D], 0.1)
    same = sum(np.array_equal(product_ann_query(prod, q, 5, 40), ann_query(flat, q, 5, 40))
               for q in r.standard_normal((100, 8)))
    ok = exact == 10_000 and same == 100
    acceptance(12, ok, f"block sums exact on {exact}/10000 pairs; single-block identical on {same}/100 queries")
    assert ok


NOVELTY_CASES = [("TwoMoons", 0.03), ("Torus", 0.05)]


@pytest.fixture(scope="module")
def novelty_runs():
    out = {}
    for kind, noise in NOVELTY_CASES:
        train = generate(DatasetSpec(kind, 2000, noise_sigma=noise, seed=0)).points
        test = generate(DatasetSpec(kind, 500, noise_sigma=noise, seed=1)).points
        outliers = outlier_box(train, 500, seed=2)
        model = fit_novelty_model(train, seed=0)
        si = [novelty_score(model, x).score for x in test]
        so = [novelty_score(model, x).score for x in outliers]
        out[kind] = (model, test, outliers, auc(si, so))
    return out


def test_13_novelty_closed_loop(acceptance, novelty_runs):
    parts, ok = [], True
    n_events, post_ok, retrigger = 0, 0, 0
    for kind, _ in NOVELTY_CASES:
        model, test, outliers, a = novelty_runs[kind]
        parts.append(f"{kind} AUC {a:.4f}")
        ok &= a >= 0.95
        stream = np.vstack([test[:100], outliers[:50]])
        for step in continual_loop(model, stream):
            if step.event is not None and step.event.escaped:
                n_events += 1
                post_ok += step.event.post_score <= model.threshold
        for x in outliers[:50]:
            _, ev = escape_insert(model, x)
            retrigger += ev.escaped
    ok &= post_ok == n_events and retrigger == 0
    acceptance(13, ok, f"{'; '.join(parts)} (>= 0.95); post_score <= threshold on {post_ok}/{n_events} escapes; "
                       f"{retrigger} re-triggers on re-presented outliers")
    assert ok


def diameter(X, chunk=500):
    """Largest pairwise l2 distance."""
    best = 0.0
    for i in range(0, X.shape[0], chunk):
        d2 = ((X[i:i + chunk, None, :] - X[None, :, :]) ** 2).sum(axis=-1)
        best = max(best, float(d2.max()))
    return np.sqrt(best)


def test_14_robustness_to_query_noise(acceptance, gaussian_ann):
    X, _, D, lam, table, index = gaussian_ann
    Q = np.random.default_rng(140).standard_normal((2000, 16))
    diam = diameter(X)
    # isotropic noise whose expected norm is 1% of the diameter
    sigma = 0.01 * diam / np.sqrt(X.shape[1])
    Qn = Q + sigma * np.random.default_rng(14).standard_normal(Q.shape)
    tree = build_tree(X, leaf_capacity=16, seed=0)
    clean, _ = nn_exact_batch(tree, Q, 1)
    noisy, _ = nn_exact_batch(tree, Qn, 1)
    agree = float(np.mean(clean[:, 0] == noisy[:, 0]))
    s = int(np.ceil(0.02 * X.shape[0]))
    r_clean = recall_at_k(np.array([ann_query(index, q, 1, s) for q in Q]), clean)
    r_noisy = recall_at_k(np.array([ann_query(index, q, 1, s) for q in Qn]), clean)
    drop = r_clean - r_noisy
    ok = agree >= 0.9 and drop <= 0.10
    acceptance(14, ok, f"noise norm {sigma * np.sqrt(X.shape[1]):.3f} (1% of diameter {diam:.2f}); "
                       f"exact top-1 agreement {agree:.3f} (>= 0.9); ANN recall {r_clean:.3f} -> {r_noisy:.3f}, "
                       f"drop {100 * drop:.1f} pp (<= 10)")
    assert ok


def test_15_determinism_and_persistence(acceptance, tmp_path):
    paths = []
    for name in ("a", "b"):
        X = generate(DatasetSpec("Torus", 500, noise_sigma=0.05, seed=3)).points
        forest = build_pm_forest(X, num_trees=4, seed=7)
        ann = build_ann_index(random_dictionary(4, 16, 7), X, 0.1)
        nov = fit_novelty_model(X, seed=7)
        p = tmp_path / f"{name}.pmf"
        save_index(p, IndexBundle(X, forest, ann, nov, {"seed": 7}))
        paths.append(p)
    same_seed = paths[0].read_bytes() == paths[1].read_bytes()
    again = tmp_path / "c.pmf"
    save_index(again, load_index(paths[0]))
    round_trip = again.read_bytes() == paths[0].read_bytes()
    ok = same_seed and round_trip
    acceptance(15, ok, f"equal seeds byte-identical: {same_seed}; save/load/save byte-identical: {round_trip}; "
                       f"suite wall time reported below")
    assert ok
