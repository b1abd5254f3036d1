"""Product-manifold trees and forests.

A PM tree splits the ambient coordinates into contiguous blocks and builds one
partition tree per block. A point's cell is the tuple of its per-block leaves;
its neighborhood is the intersection of the per-block leaf memberships.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix, as_vector
from .partition import AXIS, PartitionTree, build_tree, metric_distances, parse_metric

__all__ = [
    "Block",
    "BlockPartition",
    "ProductCell",
    "PMTree",
    "PMForest",
    "BookkeepingError",
    "build_pm_tree",
    "product_cell",
    "intersect_candidates",
    "pm_knn",
    "build_pm_forest",
    "forest_candidates",
    "forest_knn",
    "rerank",
    "derive_seeds",
]


class BookkeepingError(AssertionError):
    """Product-cell dimension differs from the sum of the factor dimensions."""


# number of PM trees whose dimension bookkeeping has been verified in this process
bookkeeping_checks = 0


@dataclass(frozen=True)
class Block:
    offset: int
    width: int


@dataclass(frozen=True)
class BlockPartition:
    blocks: tuple

    def __post_init__(self):
        blocks = tuple(Block(int(b[0]), int(b[1])) if not isinstance(b, Block) else b for b in self.blocks)
        if not blocks:
            raise ValueError("a block partition needs at least one block")
        pos = 0
        for b in blocks:
            if b.width < 1 or b.offset != pos:
                raise ValueError(f"blocks must be contiguous, non-empty and start at 0; got {blocks}")
            pos += b.width
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def from_widths(cls, widths) -> "BlockPartition":
        offsets = np.concatenate([[0], np.cumsum(widths)[:-1]]).astype(int)
        return cls(tuple(Block(int(o), int(w)) for o, w in zip(offsets, widths)))

    @classmethod
    def equal(cls, dim: int, width: int) -> "BlockPartition":
        """Contiguous blocks of ``width`` coordinates; the last block takes the remainder."""
        if width < 1 or dim < 1:
            raise ValueError("dim and width must be positive")
        widths = [width] * (dim // width)
        if dim % width:
            widths.append(dim % width)
        return cls.from_widths(widths)

    @property
    def dim(self) -> int:
        return sum(b.width for b in self.blocks)

    @property
    def widths(self) -> tuple:
        return tuple(b.width for b in self.blocks)

    def __len__(self):
        return len(self.blocks)

    def slices(self):
        return [slice(b.offset, b.offset + b.width) for b in self.blocks]


@dataclass(frozen=True)
class ProductCell:
    leaf_ids: tuple


def derive_seeds(seed: int, n: int) -> list[int]:
    """``n`` independent 64-bit seeds from one master seed."""
    state = np.random.SeedSequence(int(seed)).generate_state(n, dtype=np.uint64)
    return [int(s) for s in state]


@dataclass(eq=False)
class PMTree:
    partition: BlockPartition
    subtrees: list
    points: np.ndarray
    perm: np.ndarray | None = None
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def cell_dim(self) -> int:
        """Dimension of a product cell: the sum of its factor dimensions."""
        return sum(t.dim for t in self.subtrees)

    def permuted(self, X: np.ndarray) -> np.ndarray:
        return X if self.perm is None else X[..., self.perm]

    def block_slices(self, x: np.ndarray) -> list:
        xp = self.permuted(x)
        return [xp[s] for s in self.partition.slices()]

    def check_bookkeeping(self):
        global bookkeeping_checks
        if not (self.cell_dim == self.partition.dim == self.dim
                and len(self.subtrees) == len(self.partition)
                and all(t.dim == w for t, w in zip(self.subtrees, self.partition.widths))):
            raise BookkeepingError(
                f"cell dim {self.cell_dim}, block widths {self.partition.widths}, ambient dim {self.dim}"
            )
        bookkeeping_checks += 1

    def insert(self, x) -> int:
        """Add a point to the database and to every block tree. Single writer only."""
        x = as_vector(x, "x")
        if x.shape[0] != self.dim:
            raise ValueError(f"dimension mismatch: index dim {self.dim}, point dim {x.shape[0]}")
        pid = self.n_points
        self.points = np.vstack([self.points, x[None, :]])
        for tree, xs in zip(self.subtrees, self.block_slices(x)):
            if tree.insert(xs) != pid:
                raise RuntimeError("block trees out of sync with the database")
        self.check_bookkeeping()
        return pid


def build_pm_tree(points, partition: BlockPartition | None = None, rule=AXIS, leaf_capacity=16,
                  seed=0, perm=None, block_width: int | None = None) -> PMTree:
    X = as_matrix(points, "points")
    d = X.shape[1]
    if partition is None:
        partition = BlockPartition.equal(d, block_width or d)
    if partition.dim != d:
        raise ValueError(f"block partition covers {partition.dim} coordinates, points have {d}")
    if perm is not None:
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(d)):
            raise ValueError("perm must be a permutation of the coordinates")
    Xp = X if perm is None else X[:, perm]
    seeds = derive_seeds(seed, len(partition))
    subtrees = [
        build_tree(np.ascontiguousarray(Xp[:, s]), rule=rule, leaf_capacity=leaf_capacity, seed=sd)
        for s, sd in zip(partition.slices(), seeds)
    ]
    pm = PMTree(partition, subtrees, np.array(X), perm, int(seed))
    pm.check_bookkeeping()
    return pm


def _check_query(pm: PMTree, x) -> np.ndarray:
    x = as_vector(x, "query")
    if x.shape[0] != pm.dim:
        raise ValueError(f"dimension mismatch: index dim {pm.dim}, query dim {x.shape[0]}")
    return x


def product_cell(pm: PMTree, x) -> ProductCell:
    x = _check_query(pm, x)
    return ProductCell(tuple(t.route(xs) for t, xs in zip(pm.subtrees, pm.block_slices(x))))


def _intersect(pm: PMTree, nodes) -> np.ndarray:
    parts = [t.subtree_members(n) for t, n in zip(pm.subtrees, nodes)]
    if len(parts) == 1:
        return np.sort(parts[0])
    counts = np.bincount(np.concatenate(parts), minlength=pm.n_points)
    return np.nonzero(counts == len(parts))[0]


def intersect_candidates(pm: PMTree, q, min_candidates: int = 0) -> np.ndarray:
    """Ids sharing the query's leaf in every block, widened if too few.

    Widening moves one block at a time (round-robin) from its current node to
    the parent, so the neighborhoods only grow, until ``min_candidates`` ids
    are found or every block sits at its root.
    """
    q = _check_query(pm, q)
    nodes = [t.route(xs) for t, xs in zip(pm.subtrees, pm.block_slices(q))]
    cand = _intersect(pm, nodes)
    target = min(int(min_candidates), pm.n_points)
    b = 0
    while cand.size < target:
        moved = False
        for _ in range(len(nodes)):
            tree = pm.subtrees[b]
            if tree.parent[nodes[b]] >= 0:
                nodes[b] = tree.parent[nodes[b]]
                moved = True
            b = (b + 1) % len(nodes)
            if moved:
                break
        if not moved:
            break
        cand = _intersect(pm, nodes)
    return cand


def rerank(points: np.ndarray, cand: np.ndarray, q: np.ndarray, k: int, p: float = 2.0):
    """Exact top-``k`` of ``cand`` by distance to ``q``; ties to the smaller id."""
    cand = np.asarray(cand, dtype=np.int64)
    d = metric_distances(points[cand], q, p)
    order = np.lexsort((cand, d))[:k]
    return cand[order], d[order] ** (1.0 / p)


def default_budget(k: int) -> int:
    return max(4 * int(k), 32)


def pm_knn(pm: PMTree, q, k: int = 1, metric="l2", min_candidates: int | None = None) -> np.ndarray:
    if pm.n_points == 0:
        raise ValueError("empty database")
    if int(k) < 1:
        raise ValueError("k must be >= 1")
    p = parse_metric(metric)
    q = _check_query(pm, q)
    budget = default_budget(k) if min_candidates is None else min_candidates
    cand = intersect_candidates(pm, q, budget)
    return rerank(pm.points, cand, q, int(k), p)[0]


@dataclass(eq=False)
class PMForest:
    trees: list = field(default_factory=list)

    @property
    def points(self) -> np.ndarray:
        return self.trees[0].points

    @property
    def n_points(self) -> int:
        return self.trees[0].n_points


def build_pm_forest(points, num_trees: int = 8, seed: int = 0, block_width: int = 2, rule=AXIS,
                    leaf_capacity: int = 16, permute: bool = True) -> PMForest:
    """Ensemble of PM trees over the same database.

    Tree 0 keeps the natural coordinate order; later trees shuffle the
    coordinates (seeded) before blocking, when ``permute`` is set.
    """
    if int(num_trees) < 1:
        raise ValueError("num_trees must be >= 1")
    X = as_matrix(points, "points")
    d = X.shape[1]
    partition = BlockPartition.equal(d, min(block_width, d))
    seeds = derive_seeds(seed, 2 * num_trees)
    trees = []
    for t in range(num_trees):
        perm = None
        if permute and t > 0:
            perm = np.random.Generator(np.random.PCG64(seeds[2 * t])).permutation(d)
        trees.append(build_pm_tree(X, partition, rule=rule, leaf_capacity=leaf_capacity,
                                   seed=seeds[2 * t + 1], perm=perm))
    return PMForest(trees)


def forest_candidates(forest: PMForest, q, min_candidates: int = 0) -> np.ndarray:
    parts = [intersect_candidates(t, q, min_candidates) for t in forest.trees]
    return np.unique(np.concatenate(parts))


def forest_knn(forest: PMForest, q, k: int = 1, metric="l2", min_candidates: int | None = None) -> np.ndarray:
    if not forest.trees or forest.n_points == 0:
        raise ValueError("empty forest")
    p = parse_metric(metric)
    q = _check_query(forest.trees[0], q)
    budget = default_budget(k) if min_candidates is None else min_candidates
    cand = forest_candidates(forest, q, budget)
    return rerank(forest.points, cand, q, int(k), p)[0]
