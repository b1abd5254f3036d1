import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pmforest.metrics import brute_force_knn
from pmforest.partition import (AXIS, RP, ConvexDiffClassifier, Hyperplane, NonSeparableError, build_tree,
                                convex_diff_predict, nn_exact, nn_exact_batch, parse_metric, query_leaf,
                                xor_decompose)

XOR = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
XOR_Y = np.array([0, 1, 1, 0])


def leaf_audit(tree):
    ids = np.concatenate([tree.members[l] for l in tree.leaves()])
    assert np.array_equal(np.sort(ids), np.arange(tree.n_points)), "leaves must partition the ids"
    return ids


def test_single_point_is_single_leaf():
    t = build_tree([[1.0, 2.0]], leaf_capacity=1)
    assert t.n_nodes == 1 and t.is_leaf(t.root)
    leaf, members = query_leaf(t, [5.0, 5.0])
    assert leaf == t.root and members.tolist() == [0]


def test_xor_tree_shape_and_routing():
    t = build_tree(XOR, rule=AXIS, leaf_capacity=1)
    assert t.depth() == 2
    assert sorted(t.members[l].tolist() for l in t.leaves()) == [[0], [1], [2], [3]]
    _, members = query_leaf(t, [0.9, 0.1])
    assert members.tolist() == [2]


@pytest.mark.parametrize("rule", [AXIS, RP])
def test_leaf_capacity_and_completeness(rule, rng):
    X = rng.standard_normal((1000, 5))
    t = build_tree(X, rule=rule, leaf_capacity=16, seed=3)
    assert all(t.members[l].size <= 16 for l in t.leaves())
    leaf_audit(t)


@pytest.mark.parametrize("rule", [AXIS, RP])
def test_routing_consistency(rule, rng):
    X = rng.standard_normal((400, 3))
    t = build_tree(X, rule=rule, leaf_capacity=8, seed=1)
    for i, x in enumerate(X):
        assert i in query_leaf(t, x)[1]


def test_duplicate_points_terminate():
    X = np.ones((50, 2))
    t = build_tree(X, leaf_capacity=4)
    assert t.n_nodes == 1 and t.members[0].size == 50


def test_rp_trees_with_equal_seeds_are_identical(rng):
    X = rng.standard_normal((300, 4))
    assert build_tree(X, rule=RP, seed=9) == build_tree(X, rule=RP, seed=9)
    assert not build_tree(X, rule=RP, seed=9) == build_tree(X, rule=RP, seed=10)


def test_split_hyperplanes_are_unit(rng):
    t = build_tree(rng.standard_normal((200, 6)), rule=RP, leaf_capacity=4, seed=0)
    for node in range(t.n_nodes):
        if not t.is_leaf(node):
            assert abs(np.linalg.norm(t.hyperplane(node).normal) - 1) < 1e-12


def test_build_errors():
    with pytest.raises(ValueError):
        build_tree(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        build_tree([[1.0, 2.0], [1.0]])
    with pytest.raises(ValueError):
        build_tree([[1.0]], leaf_capacity=0)
    with pytest.raises(ValueError):
        build_tree([[1.0]], rule="kd")
    t = build_tree([[1.0, 2.0]])
    with pytest.raises(ValueError):
        query_leaf(t, [1.0])


def test_insert_splits_full_leaf_and_keeps_partition(rng):
    X = rng.standard_normal((40, 2))
    t = build_tree(X, leaf_capacity=4)
    for x in rng.standard_normal((60, 2)):
        pid = t.insert(x)
        assert pid in query_leaf(t, x)[1]
        assert all(t.members[l].size <= 4 for l in t.leaves())
    leaf_audit(t)
    assert t.n_points == 100


@pytest.mark.parametrize("metric", ["l2", "l1", "lp:0.5", ("lp", 3.0)])
@pytest.mark.parametrize("rule", [AXIS, RP])
def test_nn_exact_matches_brute_force(rule, metric, rng):
    X = rng.standard_normal((600, 5))
    Q = rng.standard_normal((40, 5))
    t = build_tree(X, rule=rule, leaf_capacity=8, seed=2)
    ids, d = nn_exact_batch(t, Q, 7, metric)
    for q, row, drow in zip(Q, ids, d):
        oid, od = brute_force_knn(X, q, 7, metric, return_distances=True)
        assert row.tolist() == oid.tolist()
        np.testing.assert_allclose(drow, od, rtol=1e-12)


def test_nn_exact_tie_rule():
    X = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    t = build_tree(X, leaf_capacity=1)
    assert nn_exact(t, [0.0, 0.0], 3).tolist() == [0, 1, 2]


def test_nn_exact_self_and_errors(rng):
    X = rng.standard_normal((100, 3))
    t = build_tree(X)
    assert nn_exact(t, X[17], 1).tolist() == [17]
    with pytest.raises(ValueError):
        nn_exact(t, X[0], 101)
    with pytest.raises(ValueError):
        nn_exact(t, X[0], 1, metric="lp:-1")
    with pytest.raises(ValueError):
        parse_metric("cosine")


@given(st.integers(1, 60), st.integers(1, 4), st.integers(1, 8), st.sampled_from([AXIS, RP]),
       st.integers(0, 2**32 - 1))
def test_nn_exact_property(n, d, cap, rule, seed):
    r = np.random.default_rng(seed)
    X = np.round(r.standard_normal((n, d)), 1)  # rounding creates ties
    q = np.round(r.standard_normal(d), 1)
    t = build_tree(X, rule=rule, leaf_capacity=cap, seed=seed)
    k = min(3, n)
    assert nn_exact(t, q, k).tolist() == brute_force_knn(X, q, k).tolist()
    leaf_audit(t)


def test_xor_decomposition():
    clf = xor_decompose(XOR, XOR_Y)
    assert [convex_diff_predict(clf, x) for x in XOR] == XOR_Y.tolist()
    assert convex_diff_predict(clf, [0, 1]) == 1
    assert convex_diff_predict(clf, [1, 1]) == 0
    # the midpoint is decided by the documented rule and is stable across calls
    mid = convex_diff_predict(clf, [0.5, 0.5])
    assert mid == convex_diff_predict(xor_decompose(XOR, XOR_Y), [0.5, 0.5])


def test_xor_jittered_samples(rng):
    clf = xor_decompose(XOR, XOR_Y)
    for _ in range(20):
        i = rng.integers(4)
        assert clf.predict(XOR[i] + rng.uniform(-0.05, 0.05, 2)) == XOR_Y[i]


def test_all_positive_labels_give_degenerate_inner():
    clf = xor_decompose(XOR, np.ones(4, dtype=int))
    assert clf.inner.offset == np.inf and clf.outer.offset == -np.inf
    assert all(clf.predict(x) == 1 for x in XOR)


def test_not_decomposable():
    # alternating labels on a line cannot be (half-space) minus (half-space)
    X = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])
    with pytest.raises(NonSeparableError):
        xor_decompose(X, [1, 0, 1, 0, 1])


def test_classifier_dim_check():
    h = Hyperplane(np.array([1.0, 0.0]), 0.0)
    with pytest.raises(ValueError):
        ConvexDiffClassifier(h, h).predict([1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        Hyperplane(np.array([2.0, 0.0]), 0.0)
