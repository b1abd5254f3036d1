"""Oracles and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata, spearmanr

from .numerics import as_matrix, as_vector
from .partition import parse_metric

__all__ = [
    "BenchResult",
    "brute_force_knn",
    "brute_force_knn_batch",
    "recall_at_k",
    "spearman",
    "auc",
]


def _power_dists(X: np.ndarray, q: np.ndarray, p: float) -> np.ndarray:
    diff = np.abs(X - q)
    if p == 2.0:
        return np.sqrt((diff * diff).sum(axis=1))
    return (diff ** p).sum(axis=1) ** (1.0 / p)


def brute_force_knn(points, q, k: int, metric="l2", return_distances: bool = False):
    """Exhaustive scan; equal distances go to the smaller id."""
    X = as_matrix(points, "points")
    if X.shape[0] == 0:
        raise ValueError("empty point set")
    k = int(k)
    if not 1 <= k <= X.shape[0]:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={X.shape[0]}")
    q = as_vector(q, "q")
    d = _power_dists(X, q, parse_metric(metric))
    ids = np.lexsort((np.arange(X.shape[0]), d))[:k]
    return (ids, d[ids]) if return_distances else ids


def brute_force_knn_batch(points, queries, k: int, metric="l2") -> np.ndarray:
    return np.stack([brute_force_knn(points, q, k, metric) for q in np.atleast_2d(queries)])


def recall_at_k(candidates, oracle) -> float:
    """Mean over queries of ``|candidate ∩ oracle| / k``."""
    C = np.atleast_2d(np.asarray(candidates))
    O = np.atleast_2d(np.asarray(oracle))
    if C.shape[0] != O.shape[0]:
        raise ValueError("candidate and oracle results cover different query sets")
    if C.shape[0] == 0:
        raise ValueError("no queries")
    k = O.shape[1]
    return float(np.mean([len(set(c.tolist()) & set(o.tolist())) / k for c, o in zip(C, O)]))


def spearman(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two equal-length samples of size >= 2")
    return float(spearmanr(a, b).statistic)


def auc(scores_in, scores_out) -> float:
    """Probability that an outlier outscores an inlier (ties count half)."""
    si = np.asarray(scores_in, dtype=np.float64).ravel()
    so = np.asarray(scores_out, dtype=np.float64).ravel()
    if si.size == 0 or so.size == 0:
        raise ValueError("need inlier and outlier scores")
    r = rankdata(np.concatenate([si, so]))
    return float((r[si.size:].sum() - so.size * (so.size + 1) / 2.0) / (si.size * so.size))


@dataclass
class BenchResult:
    """``recall_at_k`` is for the anti-sparse ANN index, ``forest_recall_at_k`` for the PM forest."""

    recall_at_k: dict = field(default_factory=dict)
    forest_recall_at_k: dict = field(default_factory=dict)
    spearman_code_vs_true: float = float("nan")
    auc_novelty: float = float("nan")
    wall_times: dict = field(default_factory=dict)

    def rows(self) -> list:
        """``(metric, value)`` pairs in a fixed order."""
        out = [(f"recall@{k}", v) for k, v in sorted(self.recall_at_k.items())]
        out += [(f"forest_recall@{k}", v) for k, v in sorted(self.forest_recall_at_k.items())]
        out.append(("spearman_code_vs_true", self.spearman_code_vs_true))
        out.append(("auc_novelty", self.auc_novelty))
        out += [(f"time_{k}", v) for k, v in self.wall_times.items()]
        return out

    def to_tsv(self, include_times: bool = True) -> str:
        lines = ["metric\tvalue"]
        for name, v in self.rows():
            if include_times or not name.startswith("time_"):
                lines.append(f"{name}\t{v:.6f}")
        return "\n".join(lines) + "\n"
