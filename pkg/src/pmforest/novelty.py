"""Novelty scoring on a PM tree with an escape mechanism for continual learning.

A sample is scored by how badly its offset from the nearest stored exemplar
is explained by the dictionary: ``residual = ||v - D a||`` where ``v = x - anchor``
and ``a`` is the basis-pursuit code of ``v``. Residuals are mapped to a
percentile of the calibration distribution, and an empty product cell adds a
fixed bonus. A novel sample escapes by being inserted into the PM tree (and,
for extreme residuals, by contributing its residual direction as a new atom),
after which it scores as normal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix, as_vector
from .partition import AXIS
from .product_index import PMTree, build_pm_tree, intersect_candidates, pm_knn
from .sparse_coding import Dictionary, basis_pursuit, basis_pursuit_batch

__all__ = [
    "NoveltyModel",
    "NoveltyReport",
    "EscapeEvent",
    "LoopStep",
    "INSERTED_INTO_TREE",
    "ADDED_ATOM",
    "EMPTY_CELL_BONUS",
    "fit_novelty_model",
    "novelty_score",
    "escape_insert",
    "continual_loop",
    "auto_leaf_capacity",
    "write_escape_log",
    "read_escape_log",
]

INSERTED_INTO_TREE = "InsertedIntoTree"
ADDED_ATOM = "AddedAtom"
EMPTY_CELL_BONUS = 0.5
LEVELS = np.linspace(0.0, 1.0, 101)


@dataclass(eq=False)
class NoveltyModel:
    pm: PMTree
    dictionary: Dictionary
    quantiles: np.ndarray
    threshold_quantile: float
    lam: float
    residual_mode: str = "local"
    atom_add_quantile: float = 0.999
    max_iters: int = 5000
    tol: float = 1e-8

    @property
    def threshold(self) -> float:
        """Decision threshold on the score (percentile) scale."""
        return self.threshold_quantile

    def percentile(self, residual: float) -> float:
        """Piecewise-linear calibrated percentile of a residual.

        Residuals at or below a run of equal quantiles map to the lowest level
        of the run, so a degenerate calibration scores its own value as 0.
        """
        q = self.quantiles
        r = float(residual)
        if r <= q[0]:
            return 0.0
        if r > q[-1]:
            return 1.0
        i = int(np.searchsorted(q, r, side="left"))
        lo, hi = q[i - 1], q[i]
        frac = 1.0 if hi <= lo else (r - lo) / (hi - lo)
        return float(LEVELS[i - 1] + frac * (LEVELS[i] - LEVELS[i - 1]))


@dataclass(frozen=True)
class NoveltyReport:
    residual: float
    cell_occupancy: int
    percentile: float
    score: float
    is_novel: bool
    anchor: int = -1


@dataclass
class EscapeEvent:
    sample: np.ndarray
    pre_score: float
    actions: list = field(default_factory=list)
    post_score: float = float("nan")
    warning: str = ""

    @property
    def escaped(self) -> bool:
        return bool(self.actions)

    def to_record(self) -> dict:
        return {
            "sample": [float(v) for v in self.sample],
            "pre_score": float(self.pre_score),
            "actions": list(self.actions),
            "post_score": float(self.post_score),
            "warning": self.warning,
        }


@dataclass(frozen=True)
class LoopStep:
    report: NoveltyReport
    event: EscapeEvent | None = None


def auto_leaf_capacity(n_points: int, n_blocks: int, target: float = 8.0) -> int:
    """Leaf size giving about ``target`` expected co-members in a product cell.

    With independent blocks, a cell of ``B`` leaves of size ``c`` holds about
    ``N (c / N)^B`` points.
    """
    n = max(int(n_points), 1)
    cap = n ** (1.0 - 1.0 / n_blocks) * target ** (1.0 / n_blocks)
    return int(max(16, np.ceil(cap)))


def _offsets(model_pm: PMTree, X: np.ndarray, mode: str, leave_one_out: bool) -> tuple:
    """Offsets from the anchors, and the anchor ids (-1 for the global mode)."""
    if mode == "global":
        return X.copy(), np.full(X.shape[0], -1, dtype=np.int64)
    anchors = np.empty(X.shape[0], dtype=np.int64)
    for i, x in enumerate(X):
        if leave_one_out:
            ids = pm_knn(model_pm, x, 2)
            rest = ids[ids != i]
            anchors[i] = rest[0] if rest.size else i
        else:
            anchors[i] = pm_knn(model_pm, x, 1)[0]
    return X - model_pm.points[anchors], anchors


def _residuals(D: Dictionary, V: np.ndarray, lam: float, max_iters: int, tol: float) -> np.ndarray:
    A, _, _ = basis_pursuit_batch(D, V, lam, max_iters, tol)
    return np.linalg.norm(V - A @ D.atoms.T, axis=1)


def fit_novelty_model(train, dictionary: Dictionary | None = None, threshold_quantile: float = 0.99,
                      lam: float | None = None, block_width: int = 2, leaf_capacity: int | None = None,
                      rule=AXIS, seed: int = 0, residual_mode: str = "local",
                      atom_add_quantile: float = 0.999, max_iters: int = 5000,
                      tol: float = 1e-8) -> NoveltyModel:
    """Build the PM tree on ``train`` and calibrate residual quantiles at 1% steps.

    In ``"local"`` mode each training point is calibrated against its nearest
    *other* training point; an in-sample anchor would be the point itself and
    give a zero residual. ``"global"`` mode codes ``x`` itself (no anchor) and
    calibrates in-sample. The default ``lam`` in local mode is the largest
    calibration offset, so offsets within the training scale are left to the
    residual and the dictionary only absorbs larger ones.
    """
    X = as_matrix(train, "train")
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    if residual_mode not in ("local", "global"):
        raise ValueError(f"residual_mode must be 'local' or 'global', got {residual_mode!r}")
    if not 0.0 < threshold_quantile < 1.0:
        raise ValueError("threshold_quantile must lie in (0, 1)")
    d = X.shape[1]
    D = dictionary if dictionary is not None else Dictionary(np.eye(d))
    if D.n != d:
        raise ValueError(f"dictionary has n={D.n}, training points have dim {d}")
    width = min(int(block_width), d)
    n_blocks = -(-d // width)
    cap = auto_leaf_capacity(X.shape[0], n_blocks) if leaf_capacity is None else int(leaf_capacity)
    pm = build_pm_tree(X, rule=rule, leaf_capacity=cap, seed=seed, block_width=width)
    V, _ = _offsets(pm, X, residual_mode, leave_one_out=True)
    if lam is None:
        top = float(np.linalg.norm(V, axis=1).max())
        lam = top if residual_mode == "local" else 0.1 * top
        lam = lam if lam > 0.0 else 1.0
    res = _residuals(D, V, lam, max_iters, tol)
    quantiles = np.quantile(res, LEVELS)
    return NoveltyModel(pm, D, quantiles, float(threshold_quantile), float(lam), residual_mode,
                        float(atom_add_quantile), int(max_iters), float(tol))


def _score(model: NoveltyModel, x: np.ndarray):
    if model.residual_mode == "global":
        v, anchor = x, -1
    else:
        anchor = int(pm_knn(model.pm, x, 1)[0])
        v = x - model.pm.points[anchor]
    code = basis_pursuit(model.dictionary, v, model.lam, model.max_iters, model.tol).coefficients
    r = v - model.dictionary.atoms @ code
    residual = float(np.linalg.norm(r))
    occupancy = int(intersect_candidates(model.pm, x).size)
    pct = model.percentile(residual)
    score = min(pct + (EMPTY_CELL_BONUS if occupancy == 0 else 0.0), 1.0)
    report = NoveltyReport(residual, occupancy, pct, score, bool(score > model.threshold), anchor)
    return report, r


def novelty_score(model: NoveltyModel, x) -> NoveltyReport:
    x = as_vector(x, "x")
    if x.shape[0] != model.pm.dim:
        raise ValueError(f"dimension mismatch: model dim {model.pm.dim}, sample dim {x.shape[0]}")
    return _score(model, x)[0]


def escape_insert(model: NoveltyModel, x):
    """Incorporate a novel sample so that it scores as normal afterwards.

    Returns ``(model, event)``; the model is updated in place. A non-novel
    sample leaves the model untouched and yields an event with a warning.
    Single writer: no concurrent scoring during the update.
    """
    x = as_vector(x, "x")
    if x.shape[0] != model.pm.dim:
        raise ValueError(f"dimension mismatch: model dim {model.pm.dim}, sample dim {x.shape[0]}")
    report, r = _score(model, x)
    event = EscapeEvent(x.copy(), report.score)
    if not report.is_novel:
        event.post_score = report.score
        event.warning = "input is not novel; model unchanged"
        return model, event
    model.pm.insert(x)
    event.actions.append(INSERTED_INTO_TREE)
    norm = float(np.linalg.norm(r))
    if report.percentile > model.atom_add_quantile and norm > 0.0:
        model.dictionary = model.dictionary.with_atom(r / norm)
        event.actions.append(ADDED_ATOM)
    event.post_score = novelty_score(model, x).score
    return model, event


def continual_loop(model: NoveltyModel, stream) -> list:
    """Score each sample in order and escape the novel ones."""
    steps = []
    for x in stream:
        report = novelty_score(model, x)
        event = None
        if report.is_novel:
            model, event = escape_insert(model, x)
        steps.append(LoopStep(report, event))
    return steps


def write_escape_log(events, path):
    """One JSON object per line with fields sample, pre_score, actions, post_score, warning."""
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_record(), sort_keys=True) + "\n")


def read_escape_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
