import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pmforest import product_index as pi
from pmforest.datasets import DatasetSpec, generate
from pmforest.metrics import brute_force_knn, recall_at_k
from pmforest.partition import RP, build_tree, query_leaf
from pmforest.product_index import (BlockPartition, BookkeepingError, build_pm_forest, build_pm_tree,
                                    forest_candidates, forest_knn, intersect_candidates, pm_knn, product_cell)


def comembers(pm, q):
    """Brute force: ids whose every block slice lands in the query's leaf for that block."""
    qs = pm.block_slices(q)
    keep = np.ones(pm.n_points, dtype=bool)
    for t, xs in zip(pm.subtrees, qs):
        leaf = t.route(xs)
        keep &= np.array([t.route(p) == leaf for p in t.points])
    return np.nonzero(keep)[0]


def test_block_partition_validation():
    assert BlockPartition.equal(5, 2).widths == (2, 2, 1)
    with pytest.raises(ValueError):
        BlockPartition(((0, 2), (3, 2)))
    with pytest.raises(ValueError):
        BlockPartition(())
    with pytest.raises(ValueError):
        build_pm_tree(np.zeros((3, 4)), BlockPartition.from_widths([2, 1]))


def test_single_block_degenerates_to_partition_tree(rng):
    X = rng.standard_normal((200, 2))
    pm = build_pm_tree(X, BlockPartition.from_widths([2]), leaf_capacity=8, seed=5)
    t = build_tree(X, leaf_capacity=8, seed=derived_seed(5))
    assert pm.subtrees[0] == t
    for q in rng.standard_normal((20, 2)):
        leaf, members = query_leaf(t, q)
        assert product_cell(pm, q).leaf_ids == (leaf,)
        assert intersect_candidates(pm, q).tolist() == members.tolist()


def derived_seed(seed):
    return pi.derive_seeds(seed, 1)[0]


def test_two_blocks_index_slices(rng):
    X = rng.standard_normal((100, 4))
    pm = build_pm_tree(X, BlockPartition.from_widths([2, 2]))
    assert len(pm.subtrees) == 2
    np.testing.assert_array_equal(pm.subtrees[0].points, X[:, :2])
    np.testing.assert_array_equal(pm.subtrees[1].points, X[:, 2:])


def test_bookkeeping_six_dims(rng):
    pm = build_pm_tree(rng.standard_normal((50, 6)), block_width=2)
    assert pm.cell_dim == 2 + 2 + 2 == 6
    pm.subtrees[0].dim = 3
    with pytest.raises(BookkeepingError):
        pm.check_bookkeeping()


def test_xor_style_cell_trace():
    X = np.array([[0, 0, 0, 1], [0, 1, 1, 1], [1, 0, 0, 0], [1, 1, 1, 0]], dtype=float)
    pm = build_pm_tree(X, block_width=2, leaf_capacity=1)
    # each 2-D block holds the XOR corners; its leaves are singletons
    for i, x in enumerate(X):
        cell = product_cell(pm, x)
        assert all(i in t.members[l] for t, l in zip(pm.subtrees, cell.leaf_ids))
    assert intersect_candidates(pm, [0.9, 0.1, 0.1, 0.9]).tolist() == []
    assert intersect_candidates(pm, [0.9, 0.1, 0.1, 0.1]).tolist() == [2]


def test_intersection_matches_brute_force(rng):
    for trial in range(5):
        X = rng.standard_normal((300, 6))
        pm = build_pm_tree(X, block_width=2, leaf_capacity=20, seed=trial, rule=RP if trial % 2 else "axis")
        for q in np.vstack([rng.standard_normal((10, 6)), X[:5]]):
            assert intersect_candidates(pm, q).tolist() == comembers(pm, q).tolist()


def test_self_retrieval(rng):
    X = rng.standard_normal((300, 4))
    pm = build_pm_tree(X, block_width=2, leaf_capacity=8)
    for i in range(0, 300, 7):
        assert i in intersect_candidates(pm, X[i])
        assert pm_knn(pm, X[i], 1).tolist() == [i]


@given(st.integers(0, 2**32 - 1), st.integers(0, 200))
def test_widening_only_grows(seed, budget):
    r = np.random.default_rng(seed)
    X = r.standard_normal((150, 4))
    pm = build_pm_tree(X, block_width=2, leaf_capacity=6, seed=seed)
    q = r.standard_normal(4)
    base = set(intersect_candidates(pm, q).tolist())
    wide = intersect_candidates(pm, q, budget)
    assert base <= set(wide.tolist())
    assert wide.size >= min(budget, 150)


def test_pm_knn_exhaustive_when_leaf_is_everything(rng):
    X = rng.standard_normal((100, 3))
    pm = build_pm_tree(X, BlockPartition.from_widths([3]), leaf_capacity=1000)
    for q in rng.standard_normal((10, 3)):
        assert pm_knn(pm, q, 5).tolist() == brute_force_knn(X, q, 5).tolist()


def test_pm_knn_errors(rng):
    pm = build_pm_tree(rng.standard_normal((10, 2)))
    with pytest.raises(ValueError):
        pm_knn(pm, [0.0, 0.0], 0)
    with pytest.raises(ValueError):
        pm_knn(pm, [0.0], 1)
    with pytest.raises(ValueError):
        build_pm_forest(np.zeros((3, 2)), num_trees=0)


def test_single_tree_forest_equals_pm_knn(rng):
    X = rng.standard_normal((400, 4))
    f = build_pm_forest(X, num_trees=1, seed=4)
    for q in rng.standard_normal((10, 4)):
        assert forest_knn(f, q, 5).tolist() == pm_knn(f.trees[0], q, 5).tolist()


def test_forest_candidates_superset_and_recall():
    X = generate(DatasetSpec("Torus", 3000, noise_sigma=0.05, seed=0)).points
    Q = generate(DatasetSpec("Torus", 100, noise_sigma=0.05, seed=1)).points
    f = build_pm_forest(X, num_trees=8, seed=0, block_width=2, leaf_capacity=16)
    oracle = np.stack([brute_force_knn(X, q, 10) for q in Q])
    single = np.stack([pm_knn(f.trees[0], q, 10) for q in Q])
    forest = np.stack([forest_knn(f, q, 10) for q in Q])
    for q in Q[:10]:
        fc = set(forest_candidates(f, q, 40).tolist())
        for t in f.trees:
            assert set(intersect_candidates(t, q, 40).tolist()) <= fc
    r1, r8 = recall_at_k(single, oracle), recall_at_k(forest, oracle)
    assert r8 >= r1
    assert r8 >= 0.8


def test_forest_deterministic(rng):
    X = rng.standard_normal((200, 6))
    a, b = build_pm_forest(X, 3, seed=11), build_pm_forest(X, 3, seed=11)
    for ta, tb in zip(a.trees, b.trees):
        assert all(sa == sb for sa, sb in zip(ta.subtrees, tb.subtrees))
        assert (ta.perm is None and tb.perm is None) or np.array_equal(ta.perm, tb.perm)
    assert a.trees[0].perm is None


def test_pm_insert_keeps_blocks_in_sync(rng):
    X = rng.standard_normal((50, 4))
    pm = build_pm_tree(X, block_width=2, leaf_capacity=4)
    for x in rng.standard_normal((30, 4)):
        pid = pm.insert(x)
        assert pid in intersect_candidates(pm, x)
    assert all(t.n_points == 80 for t in pm.subtrees)
