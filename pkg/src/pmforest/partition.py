"""Binary space-partitioning trees and the convex-difference classifier.

Two split rules are provided:

* ``"axis"``: k-d style, split the coordinate with the largest spread.
* ``"rp"``: random-projection tree, split along a seeded random unit direction.

Both split at the median projection. The offset is placed halfway between the
two middle order statistics so no stored point ever lies exactly on a
hyperplane; routing (``normal . x <= offset`` goes left) is then insensitive
to summation order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from ._backend import kernels
from .numerics import as_matrix, as_vector

__all__ = [
    "AXIS",
    "RP",
    "Hyperplane",
    "PartitionTree",
    "build_tree",
    "query_leaf",
    "nn_exact",
    "nn_exact_batch",
    "parse_metric",
    "ConvexDiffClassifier",
    "NonSeparableError",
    "xor_decompose",
    "convex_diff_predict",
]

AXIS = "axis"
RP = "rp"
_RULES = (AXIS, RP)


def parse_metric(metric) -> float:
    """Map a metric spec to its exponent ``p``.

    Accepts ``"l2"``, ``"lp:<p>"``, ``("lp", p)`` or a bare positive number.
    """
    if isinstance(metric, str):
        s = metric.strip().lower()
        if s == "l2":
            return 2.0
        if s == "l1":
            return 1.0
        if s.startswith("lp:") or s.startswith("lp("):
            p = float(s[3:].rstrip(")"))
        else:
            raise ValueError(f"unknown metric {metric!r}")
    elif isinstance(metric, tuple):
        if len(metric) != 2 or metric[0] != "lp":
            raise ValueError(f"unknown metric {metric!r}")
        p = float(metric[1])
    else:
        p = float(metric)
    if not (p > 0.0 and math.isfinite(p)):
        raise ValueError(f"metric exponent must be positive and finite, got {p}")
    return p


def metric_distances(points: np.ndarray, q: np.ndarray, p: float) -> np.ndarray:
    """Distances from ``q`` to each row, in comparison space (see ``to_distance``)."""
    diff = np.abs(points - q)
    if p == 2.0:
        return (diff * diff).sum(axis=1)
    if p == 1.0:
        return diff.sum(axis=1)
    if p == 0.5:
        return np.sqrt(diff).sum(axis=1)
    return (diff ** p).sum(axis=1)


def to_distance(cmp_values, p: float):
    """Convert comparison-space values (``sum |d|^p``) to actual distances."""
    return np.asarray(cmp_values) ** (1.0 / p)


@dataclass(frozen=True)
class Hyperplane:
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValueError("hyperplane normal must have unit l2 norm")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def positive(self, x) -> bool:
        """True on the strict positive side, ``normal . x > offset``."""
        return bool(float(self.normal @ np.asarray(x, dtype=np.float64)) > self.offset)


def _node_direction(seed: int, node: int, dim: int) -> np.ndarray:
    # Per-node stream so insertion-time splits are reproducible independently of build order.
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(node),))))
    while True:
        v = rng.standard_normal(dim)
        nrm = np.linalg.norm(v)
        if nrm > 0.0:
            return v / nrm


class PartitionTree:
    """Arena-allocated binary partition tree over the rows of ``points``.

    Internal nodes carry a hyperplane; leaves carry sorted point ids. The tree
    keeps a reference to the data so it can answer exact k-NN queries and grow
    by insertion.
    """

    def __init__(self, points, rule=AXIS, leaf_capacity=16, seed=0):
        if rule not in _RULES:
            raise ValueError(f"rule must be one of {_RULES}, got {rule!r}")
        if int(leaf_capacity) < 1:
            raise ValueError("leaf_capacity must be >= 1")
        self.points = np.ascontiguousarray(as_matrix(points, "points"))
        self.dim = self.points.shape[1]
        self.rule = rule
        self.leaf_capacity = int(leaf_capacity)
        self.seed = int(seed)
        self.axis: list[int] = []
        self.normal: list[np.ndarray | None] = []
        self.offset: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.parent: list[int] = []
        self.members: list[np.ndarray | None] = []
        self.root = 0
        self._flat = None

    # -- construction -------------------------------------------------------

    def _new_node(self, parent: int) -> int:
        self.axis.append(-1)
        self.normal.append(None)
        self.offset.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.parent.append(parent)
        self.members.append(None)
        return len(self.left) - 1

    def _choose_split(self, node: int, ids: np.ndarray):
        pts = self.points[ids]
        if self.rule == AXIS:
            spread = pts.max(axis=0) - pts.min(axis=0)
            a = int(np.argmax(spread))
            if spread[a] <= 0.0:
                return None
            normal = np.zeros(self.dim)
            normal[a] = 1.0
            proj = pts[:, a]
        else:
            a = -1
            normal = _node_direction(self.seed, node, self.dim)
            proj = pts @ normal
        s = np.sort(proj)
        c = s.size
        half = (c + 1) // 2
        # Nearest cut to the middle that separates distinct values.
        for h in sorted(range(1, c), key=lambda h: (abs(h - half), h)):
            if s[h - 1] < s[h]:
                offset = 0.5 * (s[h - 1] + s[h])
                if s[h - 1] < offset < s[h]:
                    break
        else:
            return None
        go_left = proj <= offset
        return a, normal, float(offset), ids[go_left], ids[~go_left]

    def _grow(self, node: int, ids: np.ndarray):
        work = [(node, ids)]
        while work:
            node, ids = work.pop()
            split = None
            if ids.size > self.leaf_capacity:
                split = self._choose_split(node, ids)
            if split is None:
                self.members[node] = np.sort(ids).astype(np.int64)
                continue
            a, normal, offset, lids, rids = split
            self.members[node] = None
            self.axis[node] = a
            self.normal[node] = normal
            self.offset[node] = offset
            left = self._new_node(node)
            right = self._new_node(node)
            self.left[node] = left
            self.right[node] = right
            # right is pushed first so the left subtree is numbered first
            work.append((right, rids))
            work.append((left, lids))
        self._flat = None

    # -- structure ----------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def leaves(self) -> list[int]:
        return [i for i in range(self.n_nodes) if self.left[i] < 0]

    def depth(self) -> int:
        best = 0
        stack = [(self.root, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.left[node] >= 0:
                stack.append((self.left[node], d + 1))
                stack.append((self.right[node], d + 1))
        return best

    def hyperplane(self, node: int) -> Hyperplane:
        if self.is_leaf(node):
            raise ValueError(f"node {node} is a leaf")
        return Hyperplane(self.normal[node], self.offset[node])

    def flat(self):
        """Contiguous arrays for the compiled search kernel (cached)."""
        if self._flat is not None:
            return self._flat
        n = self.n_nodes
        start = np.zeros(n, dtype=np.int64)
        end = np.zeros(n, dtype=np.int64)
        order = []
        # depth-first, left before right: every subtree is a contiguous run of `order`
        stack = [(self.root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                end[node] = len(order)
                continue
            start[node] = len(order)
            if self.left[node] < 0:
                order.extend(self.members[node].tolist())
                end[node] = len(order)
            else:
                stack.append((node, True))
                stack.append((self.right[node], False))
                stack.append((self.left[node], False))
        normal = np.zeros((n, self.dim))
        for i, v in enumerate(self.normal):
            if v is not None:
                normal[i] = v
        self._flat = {
            "order": np.asarray(order, dtype=np.int64),
            "axis": np.asarray(self.axis, dtype=np.int64),
            "normal": normal,
            "offset": np.asarray(self.offset, dtype=np.float64),
            "left": np.asarray(self.left, dtype=np.int64),
            "right": np.asarray(self.right, dtype=np.int64),
            "start": start,
            "end": end,
        }
        return self._flat

    def subtree_members(self, node: int) -> np.ndarray:
        f = self.flat()
        return f["order"][f["start"][node]:f["end"][node]]

    def route(self, x) -> int:
        node = self.root
        while self.left[node] >= 0:
            a = self.axis[node]
            proj = x[a] if a >= 0 else float(self.normal[node] @ x)
            node = self.left[node] if proj - self.offset[node] <= 0.0 else self.right[node]
        return node

    # -- mutation -----------------------------------------------------------

    def insert(self, x) -> int:
        """Append ``x`` to the data, route it to a leaf, split the leaf if over capacity.

        Returns the new point id. Not safe under concurrent readers.
        """
        x = as_vector(x, "x")
        if x.shape[0] != self.dim:
            raise ValueError(f"dimension mismatch: tree dim {self.dim}, point dim {x.shape[0]}")
        pid = self.points.shape[0]
        self.points = np.ascontiguousarray(np.vstack([self.points, x[None, :]]))
        leaf = self.route(x)
        ids = np.append(self.members[leaf], pid).astype(np.int64)
        self.members[leaf] = ids
        if ids.size > self.leaf_capacity:
            self._grow(leaf, ids)
        self._flat = None
        return pid

    def __eq__(self, other):
        if not isinstance(other, PartitionTree):
            return NotImplemented
        if (self.dim, self.rule, self.leaf_capacity, self.seed, self.n_nodes) != (
            other.dim, other.rule, other.leaf_capacity, other.seed, other.n_nodes
        ):
            return False
        a, b = self.flat(), other.flat()
        return all(np.array_equal(a[key], b[key]) for key in a) and np.array_equal(self.points, other.points)

    __hash__ = None


def build_tree(points, rule=AXIS, leaf_capacity=16, seed=0) -> PartitionTree:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("build_tree needs a non-empty (N, d) point set")
    tree = PartitionTree(pts, rule=rule, leaf_capacity=leaf_capacity, seed=seed)
    root = tree._new_node(-1)
    tree._grow(root, np.arange(tree.n_points, dtype=np.int64))
    return tree


def query_leaf(tree: PartitionTree, x):
    """Route ``x`` to its leaf; returns ``(leaf_id, member_ids)``."""
    x = as_vector(x, "x")
    if x.shape[0] != tree.dim:
        raise ValueError(f"dimension mismatch: tree dim {tree.dim}, query dim {x.shape[0]}")
    leaf = tree.route(x)
    return leaf, tree.members[leaf]


def _bound_scale(tree: PartitionTree, p: float) -> np.ndarray:
    # Far-side lower bound is |n.q - c| / ||n||_dual (Hoelder); lp with p<1 dominates l1.
    scale = np.ones(tree.n_nodes)
    if p == 2.0:
        return scale
    for i, v in enumerate(tree.normal):
        if v is None or tree.axis[i] >= 0:
            continue
        a = np.abs(v)
        if p <= 1.0:
            dual = a.max()
        else:
            qexp = p / (p - 1.0)
            dual = (a ** qexp).sum() ** (1.0 / qexp)
        scale[i] = 1.0 / dual
    return scale


def nn_exact_batch(tree: PartitionTree, queries, k: int, metric="l2"):
    """Exact k-NN for each row of ``queries`` by branch-and-bound backtracking.

    Returns ``(ids, distances)``, each of shape ``(Q, k)``; ties go to the
    smaller point id.
    """
    p = parse_metric(metric)
    Q = np.ascontiguousarray(np.atleast_2d(np.asarray(queries, dtype=np.float64)))
    if Q.shape[1] != tree.dim:
        raise ValueError(f"dimension mismatch: tree dim {tree.dim}, query dim {Q.shape[1]}")
    if tree.n_points == 0:
        raise ValueError("empty tree")
    k = int(k)
    if not 1 <= k <= tree.n_points:
        raise ValueError(f"k must be in [1, {tree.n_points}], got {k}")
    f = tree.flat()
    ids, cmp = kernels.tree_knn(
        tree.points, f["order"], f["axis"], f["normal"], f["offset"], _bound_scale(tree, p),
        f["left"], f["right"], f["start"], f["end"], tree.root, Q, k, p,
    )
    return ids, to_distance(cmp, p)


def nn_exact(tree: PartitionTree, q, k: int = 1, metric="l2") -> np.ndarray:
    q = as_vector(q, "q")
    ids, _ = nn_exact_batch(tree, q[None, :], k, metric)
    return ids[0]


# ---------------------------------------------------------------- convex difference


class NonSeparableError(ValueError):
    """No outer-minus-inner pair of linear separators reproduces the labels."""


_ALWAYS = math.inf


@dataclass(frozen=True)
class ConvexDiffClassifier:
    """``predict(x) = outer.positive(x) and not inner.positive(x)``.

    An offset of ``-inf`` makes a hyperplane accept everything, ``+inf`` nothing.
    Points exactly on a hyperplane count as negative for it.
    """

    outer: Hyperplane
    inner: Hyperplane

    def predict(self, x) -> int:
        x = as_vector(x, "x")
        if x.shape[0] != self.outer.normal.shape[0]:
            raise ValueError("dimension mismatch")
        return int(self.outer.positive(x) and not self.inner.positive(x))


def convex_diff_predict(c: ConvexDiffClassifier, x) -> int:
    return c.predict(x)


def _separable(X: np.ndarray, y: np.ndarray) -> bool:
    # LP feasibility: exists (w, b) with y_i (w.x_i + b) >= 1
    A = -y[:, None] * np.hstack([X, np.ones((X.shape[0], 1))])
    res = linprog(np.zeros(X.shape[1] + 1), A_ub=A, b_ub=-np.ones(X.shape[0]),
                  bounds=[(None, None)] * (X.shape[1] + 1), method="highs")
    return res.status == 0


def _perceptron(X: np.ndarray, y: np.ndarray, margin=1.0, lr=1.0, max_epochs=10_000) -> Hyperplane:
    d = X.shape[1]
    if np.all(y > 0):
        return Hyperplane(np.eye(d)[0], -_ALWAYS)
    if np.all(y < 0):
        return Hyperplane(np.eye(d)[0], _ALWAYS)
    Xa = np.hstack([X, np.ones((X.shape[0], 1))])
    w = np.zeros(d + 1)
    for _ in range(max_epochs):
        mistakes = 0
        for xi, yi in zip(Xa, y):
            if yi * (w @ xi) <= margin:
                w += lr * yi * xi
                mistakes += 1
        if mistakes == 0:
            nrm = np.linalg.norm(w[:d])
            if nrm == 0.0:
                break
            return Hyperplane(w[:d] / nrm, -w[d] / nrm)
    raise NonSeparableError(f"perceptron did not converge in {max_epochs} epochs")


def _inner_candidates(neg: np.ndarray):
    """Subsets of the negatives to try as the intersection set, smallest first.

    Each candidate is a prefix of the negatives sorted along a coordinate axis
    or a principal axis, so it is cut off by a hyperplane as the inner set must be.
    """
    n, d = neg.shape
    dirs = list(np.eye(d))
    if n >= 2:
        _, vecs = np.linalg.eigh(np.cov(neg.T).reshape(d, d))
        dirs.extend(vecs.T[::-1])
    seen = {frozenset()}
    out = [np.zeros(0, dtype=np.int64)]
    for size in range(1, n + 1):
        for v, sgn in itertools.product(dirs, (1.0, -1.0)):
            idx = np.argsort(-sgn * (neg @ v), kind="stable")[:size]
            key = frozenset(idx.tolist())
            if key not in seen:
                seen.add(key)
                out.append(np.sort(idx))
    return out


def xor_decompose(points, labels) -> ConvexDiffClassifier:
    """Express a labeled set as (union set) minus (intersection set), both linearly separable.

    The XOR layout decomposes as ``(X | Y) - (X & Y)``. Separators are trained by a
    margin perceptron after an LP check confirms separability.
    """
    X = as_matrix(points, "points")
    lab = np.asarray(labels).astype(int)
    if lab.shape != (X.shape[0],) or not np.isin(lab, (0, 1)).all():
        raise ValueError("labels must be a 0/1 vector, one per point")
    pos = np.nonzero(lab == 1)[0]
    neg = np.nonzero(lab == 0)[0]
    for cand in _inner_candidates(X[neg]):
        inner_ids = neg[cand]
        outer_y = np.where(lab == 1, 1.0, -1.0)
        outer_y[inner_ids] = 1.0
        inner_mask = np.zeros(X.shape[0], dtype=bool)
        inner_mask[inner_ids] = True
        # inner separator only has to reject the positives
        in_rows = np.concatenate([inner_ids, pos])
        inner_y = np.where(inner_mask[in_rows], 1.0, -1.0)
        if not _separable_or_trivial(X, outer_y) or not _separable_or_trivial(X[in_rows], inner_y):
            continue
        outer = _perceptron(X, outer_y)
        if inner_ids.size == 0:
            inner = Hyperplane(np.eye(X.shape[1])[0], _ALWAYS)
        else:
            inner = _perceptron(X[in_rows], inner_y)
        clf = ConvexDiffClassifier(outer, inner)
        if all(clf.predict(x) == t for x, t in zip(X, lab)):
            return clf
    raise NonSeparableError("labels are not a difference of two linearly separable sets")


def _separable_or_trivial(X, y) -> bool:
    if y.size == 0 or np.all(y > 0) or np.all(y < 0):
        return True
    return _separable(X, y)
