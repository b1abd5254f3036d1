"""Anti-sparse (l-infinity) coding, sign binarization and code-space ANN search.

Bit layout of packed codes: code ``i`` of a row lives in word ``i // 64`` at
bit position ``i % 64`` (little-endian ``uint64`` words). A set bit means the
sign is +1. Zero coefficients binarize to +1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from ._backend import kernels
from .numerics import as_matrix, as_vector, make_rng, prox_linf
from .partition import parse_metric
from .product_index import BlockPartition, rerank
from .sparse_coding import Dictionary, lipschitz

__all__ = [
    "SpreadCode",
    "AnnIndex",
    "ProductAnnIndex",
    "SolverError",
    "EPS_SAT",
    "linf_encode_exact",
    "antisparse_encode",
    "antisparse_encode_batch",
    "binarize",
    "pack_codes",
    "unpack_codes",
    "code_inner",
    "build_ann_index",
    "ann_query",
    "build_product_ann",
    "product_ann_query",
    "negation_symmetry_check",
    "code_similarity_spearman",
    "calibrate_lambda",
]

EPS_SAT = 1e-6
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 5000


class SolverError(RuntimeError):
    """The exact l-infinity solver did not reach its tolerance."""


def _signs(alpha: np.ndarray) -> np.ndarray:
    return np.where(alpha >= 0.0, 1, -1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class SpreadCode:
    alpha: np.ndarray
    iterations: int = 0
    objective: float = float("nan")
    certified: bool = False
    trace: np.ndarray | None = None

    @property
    def linf(self) -> float:
        return float(np.abs(self.alpha).max()) if self.alpha.size else 0.0

    @property
    def saturated(self) -> frozenset:
        """Indices with ``|alpha_i| >= (1 - EPS_SAT) * linf``."""
        t = self.linf
        if t == 0.0:
            return frozenset(range(self.alpha.size))
        return frozenset(np.flatnonzero(np.abs(self.alpha) >= (1.0 - EPS_SAT) * t).tolist())

    @property
    def sign_code(self) -> np.ndarray:
        return _signs(self.alpha)


def _check_signal(D: Dictionary, x) -> np.ndarray:
    x = as_vector(x, "x")
    if x.shape[0] != D.n:
        raise ValueError(f"dimension mismatch: dictionary has n={D.n}, signal has dim {x.shape[0]}")
    return x


def _polish(A: np.ndarray, x: np.ndarray, alpha: np.ndarray):
    """Active-set solve of the minimax problem from an approximate solution.

    Fixes the ``m - n + 1`` largest coordinates at ``+-t`` (signs taken from
    ``alpha``), solves the square system for ``t`` and the free coordinates,
    and checks optimality with the dual vector orthogonal to the free atoms.
    Returns the refined vector or ``None`` if it cannot be certified.
    """
    n, m = A.shape
    order = np.argsort(-np.abs(alpha), kind="stable")
    S, F = order[: m - n + 1], order[m - n + 1:]
    s = np.where(alpha[S] >= 0.0, 1.0, -1.0)
    M = np.column_stack([A[:, S] @ s, A[:, F]])
    try:
        sol = np.linalg.solve(M, x)
    except np.linalg.LinAlgError:
        return None
    t = sol[0]
    if not t > 0.0 or np.any(np.abs(sol[1:]) > t * (1.0 + 1e-12)):
        return None
    # dual vector: orthogonal to the free atoms, normalized so sum_i s_i <D_i, y> = 1
    if F.size:
        _, _, Vt = np.linalg.svd(A[:, F].T)
        y = Vt[-1]
    else:
        y = np.linalg.lstsq(A[:, S].T, s, rcond=None)[0]
    g = s * (A[:, S].T @ y)
    total = g.sum()
    if total == 0.0:
        return None
    g = g / total
    if np.any(g < -1e-9):
        return None
    out = np.empty(m)
    out[S] = t * s
    out[F] = sol[1:]
    return out


def linf_encode_exact(D: Dictionary, x, max_iters: int = 20000, tol: float = 1e-11,
                      rho: float = 1.0) -> SpreadCode:
    """Minimum l-infinity norm representation: ``min ||a||_inf s.t. D a = x``.

    Alternating-direction iterations on the split ``a = z`` (``a`` projected onto
    the affine set, ``z`` through the l-infinity prox), followed by an exact
    active-set polish that is accepted only with a dual optimality certificate.
    In generic position the solution has ``m - n + 1`` coordinates at ``+-linf``.
    """
    x = _check_signal(D, x)
    A = D.atoms
    n, m = A.shape
    if np.linalg.matrix_rank(A) < n:
        raise ValueError("dictionary is rank deficient: the constraint D a = x may be infeasible")
    if not np.any(x):
        return SpreadCode(np.zeros(m), 0, 0.0, True)
    if m == n:
        alpha = np.linalg.solve(A, x)
        return SpreadCode(alpha, 0, float(np.abs(alpha).max()), True)

    scale = float(np.linalg.norm(x))
    xs = x / scale
    G = np.linalg.inv(A @ A.T)
    pinv = A.T @ G
    a0 = pinv @ xs

    def project(v):
        return v - pinv @ (A @ v - xs)

    z = a0.copy()
    u = np.zeros(m)
    lam = 1.0 / float(rho)
    it = 0
    alpha = a0
    converged = False
    while it < max_iters:
        it += 1
        alpha = project(z - u)
        z_old = z
        z = prox_linf(alpha + u, lam)
        u += alpha - z
        if it % 10 == 0:
            r = np.abs(alpha - z).max()
            s = np.abs(z - z_old).max()
            if r <= tol and s <= tol:
                converged = True
                break
            # the active set is usually identified long before convergence
            if it % 50 == 0 and r <= 1e-3 and _polish(A, xs, alpha) is not None:
                break
    polished = _polish(A, xs, alpha)
    if polished is not None:
        alpha = project(polished)
        return SpreadCode(alpha * scale, it, float(np.abs(alpha).max()) * scale, True)
    if not converged:
        raise SolverError(f"no convergence within {max_iters} iterations")
    alpha = project(alpha) * scale
    return SpreadCode(alpha, it, float(np.abs(alpha).max()), False)


def _check_lam(lam) -> float:
    lam = float(lam)
    if not lam > 0.0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return lam


def antisparse_encode_batch(D: Dictionary, Y, lam: float, max_iters: int = DEFAULT_MAX_ITERS,
                            tol: float = DEFAULT_TOL, lip: float | None = None):
    """Row-wise minimizer of ``0.5 ||D a - y||^2 + lam ||a||_inf``.

    Returns ``(codes, iterations, objectives)``.
    """
    lam = _check_lam(lam)
    Y = np.ascontiguousarray(np.atleast_2d(np.asarray(Y, dtype=np.float64)))
    if not np.all(np.isfinite(Y)):
        raise ValueError("signal contains non-finite entries")
    if Y.shape[1] != D.n:
        raise ValueError(f"dimension mismatch: dictionary has n={D.n}, signal has dim {Y.shape[1]}")
    L = lipschitz(D) if lip is None else float(lip)
    return kernels.mfista_linf_batch(D.atoms, Y, lam, L, int(max_iters), float(tol), None)


def antisparse_encode(D: Dictionary, y, lam: float, max_iters: int = DEFAULT_MAX_ITERS,
                      tol: float = DEFAULT_TOL, record: bool = False) -> SpreadCode:
    """Accelerated proximal gradient on ``0.5 ||D a - y||^2 + lam ||a||_inf``.

    Starts at zero with step ``1/L``. A candidate that would raise the objective
    is not accepted (monotone variant), so the recorded objective never
    increases. Every update is odd in ``y``, hence ``encode(-y) == -encode(y)``.
    """
    lam = _check_lam(lam)
    y = _check_signal(D, y)
    hist = np.zeros((1, int(max_iters) + 1)) if record else None
    A, it, obj = kernels.mfista_linf_batch(D.atoms, np.ascontiguousarray(y[None, :]), lam, lipschitz(D),
                                           int(max_iters), float(tol), hist)
    trace = hist[0, : it[0] + 1].copy() if record else None
    return SpreadCode(A[0], int(it[0]), float(obj[0]), False, trace)


def binarize(code) -> np.ndarray:
    """Componentwise sign in ``{-1, +1}`` with ``sign(0) = +1``."""
    alpha = code.alpha if isinstance(code, SpreadCode) else np.asarray(code, dtype=np.float64)
    if not np.all(np.isfinite(alpha)):
        raise ValueError("code contains non-finite entries")
    return _signs(alpha)


def pack_codes(signs) -> np.ndarray:
    """Pack ``(N, m)`` sign vectors into ``(N, ceil(m / 64))`` little-endian words."""
    S = np.atleast_2d(np.asarray(signs))
    N, m = S.shape
    words = max(1, -(-m // 64))
    bits = np.zeros((N, words * 64), dtype=np.uint8)
    bits[:, :m] = S > 0
    packed = np.packbits(bits, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def unpack_codes(words, m: int) -> np.ndarray:
    W = np.ascontiguousarray(np.atleast_2d(np.asarray(words, dtype=np.uint64))).astype("<u8")
    bits = np.unpackbits(W.view(np.uint8), axis=1, bitorder="little")[:, :m]
    return np.where(bits == 1, 1, -1).astype(np.int8)


def code_inner(words, query_words, m: int) -> np.ndarray:
    """``e(z)^T e(y)`` for every packed row, as ``m - 2 * hamming``."""
    codes = np.ascontiguousarray(np.atleast_2d(words), dtype=np.uint64)
    q = np.ascontiguousarray(np.asarray(query_words, dtype=np.uint64).ravel())
    return np.asarray(kernels.code_scores(codes, q, int(m)))


@dataclass(eq=False)
class AnnIndex:
    dictionary: Dictionary
    codes: np.ndarray
    originals: np.ndarray
    lam: float
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL

    @property
    def n_points(self) -> int:
        return self.codes.shape[0]

    @property
    def nbits(self) -> int:
        return self.dictionary.m

    def encode(self, Z) -> np.ndarray:
        """Packed codes for the rows of ``Z``."""
        A, _, _ = antisparse_encode_batch(self.dictionary, Z, self.lam, self.max_iters, self.tol)
        return pack_codes(_signs(A))


def build_ann_index(D: Dictionary, database, lam: float, max_iters: int = DEFAULT_MAX_ITERS,
                    tol: float = DEFAULT_TOL) -> AnnIndex:
    X = as_matrix(database, "database")
    if X.shape[1] != D.n:
        raise ValueError(f"dimension mismatch: dictionary has n={D.n}, database has dim {X.shape[1]}")
    idx = AnnIndex(D, np.empty((0, 1), dtype=np.uint64), np.ascontiguousarray(X), _check_lam(lam),
                   int(max_iters), float(tol))
    idx.codes = idx.encode(X)
    return idx


def _shortlist(scores: np.ndarray, size: int) -> np.ndarray:
    # highest score first, ties to the smaller id
    return np.argsort(-scores, kind="stable")[:size]


def _check_query_args(n_points: int, k: int, shortlist_size):
    if n_points == 0:
        raise ValueError("empty index")
    k = int(k)
    s = n_points if shortlist_size is None else int(shortlist_size)
    if not 1 <= k <= s <= n_points:
        raise ValueError(f"need 1 <= k <= shortlist_size <= N, got k={k}, shortlist={s}, N={n_points}")
    return k, s


def ann_query(index: AnnIndex, z, k: int = 1, shortlist_size: int | None = None,
              metric="l2", return_distances: bool = False):
    """Top-``k`` ids: code-space shortlist, then exact re-rank of the shortlist."""
    k, s = _check_query_args(index.n_points, k, shortlist_size)
    z = _check_signal(index.dictionary, z)
    scores = code_inner(index.codes, index.encode(z[None, :])[0], index.nbits)
    ids, d = rerank(index.originals, _shortlist(scores, s), z, k, parse_metric(metric))
    return (ids, d) if return_distances else ids


@dataclass(eq=False)
class ProductAnnIndex:
    """One anti-sparse index per coordinate block over shared database ids.

    Each block keeps its distinct database codes plus the map from point id to
    distinct code, so a query block code is scored once per distinct code. The
    resulting per-block score tables are memoized by query block code and are
    reused by later queries that share it.
    """

    blocks: BlockPartition
    per_block: list
    originals: np.ndarray
    unique_codes: list = field(default_factory=list)
    inverse: list = field(default_factory=list)
    cache_size: int = 4096
    _tables: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.unique_codes:
            for ix in self.per_block:
                u, inv = np.unique(ix.codes, axis=0, return_inverse=True)
                self.unique_codes.append(np.ascontiguousarray(u))
                self.inverse.append(inv.ravel())
        self._tables = [dict() for _ in self.per_block]

    @property
    def n_points(self) -> int:
        return self.originals.shape[0]

    @property
    def nbits(self) -> int:
        return sum(ix.nbits for ix in self.per_block)

    def block_scores(self, b: int, qword: np.ndarray) -> np.ndarray:
        key = qword.tobytes()
        table = self._tables[b]
        hit = table.get(key)
        if hit is None:
            hit = code_inner(self.unique_codes[b], qword, self.per_block[b].nbits)
            if len(table) >= self.cache_size:
                table.pop(next(iter(table)))
            table[key] = hit
        return hit[self.inverse[b]]

    def scores(self, z) -> np.ndarray:
        """Summed block scores, equal to the inner product of the concatenated codes."""
        total = np.zeros(self.n_points, dtype=np.int64)
        for b, (ix, sl) in enumerate(zip(self.per_block, self.blocks.slices())):
            total += self.block_scores(b, ix.encode(z[None, sl])[0])
        return total


def build_product_ann(blocks: BlockPartition, database, dictionaries, lams,
                      max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> ProductAnnIndex:
    X = as_matrix(database, "database")
    if blocks.dim != X.shape[1]:
        raise ValueError(f"blocks cover {blocks.dim} coordinates, database has {X.shape[1]}")
    dictionaries = list(dictionaries)
    lams = [lams] * len(blocks) if np.isscalar(lams) else list(lams)
    if len(dictionaries) != len(blocks) or len(lams) != len(blocks):
        raise ValueError("need one dictionary and one lambda per block")
    per = []
    for D, lam, sl, w in zip(dictionaries, lams, blocks.slices(), blocks.widths):
        if D.n != w:
            raise ValueError(f"block of width {w} paired with a dictionary of n={D.n}")
        per.append(build_ann_index(D, np.ascontiguousarray(X[:, sl]), lam, max_iters, tol))
    return ProductAnnIndex(blocks, per, np.ascontiguousarray(X))


def product_ann_query(index: ProductAnnIndex, z, k: int = 1, shortlist_size: int | None = None,
                      metric="l2", return_distances: bool = False):
    k, s = _check_query_args(index.n_points, k, shortlist_size)
    z = as_vector(z, "query")
    if z.shape[0] != index.blocks.dim:
        raise ValueError(f"dimension mismatch: index dim {index.blocks.dim}, query dim {z.shape[0]}")
    ids, d = rerank(index.originals, _shortlist(index.scores(z), s), z, k, parse_metric(metric))
    return (ids, d) if return_distances else ids


def negation_symmetry_check(D: Dictionary, y, lam: float, **kwargs) -> bool:
    """Whether ``e(-y) == -e(y)`` for the anti-sparse encoder."""
    y = _check_signal(D, y)
    pos = binarize(antisparse_encode(D, y, lam, **kwargs))
    neg = binarize(antisparse_encode(D, -y, lam, **kwargs))
    return bool(np.array_equal(neg, -pos))


def code_similarity_spearman(D: Dictionary, sample, lam: float, n_pairs: int = 2000, seed: int = 0,
                             max_iters: int = DEFAULT_MAX_ITERS) -> float:
    """Spearman correlation of code inner products with cosine similarity over random pairs."""
    X = as_matrix(sample, "sample")
    if X.shape[0] < 2:
        raise ValueError("need at least two sample points")
    A, _, _ = antisparse_encode_batch(D, X, lam, max_iters)
    E = _signs(A).astype(np.int64)
    rng = make_rng(seed)
    i = rng.integers(0, X.shape[0], n_pairs)
    j = rng.integers(0, X.shape[0] - 1, n_pairs)
    j = j + (j >= i)
    norms = np.linalg.norm(X, axis=1)
    cos = np.einsum("ij,ij->i", X[i], X[j]) / np.maximum(norms[i] * norms[j], 1e-300)
    code = np.einsum("ij,ij->i", E[i], E[j])
    return float(spearmanr(code, cos).statistic)


def calibrate_lambda(D: Dictionary, sample, lams=(0.01, 0.03, 0.1, 0.3, 1.0), n_pairs: int = 2000,
                     seed: int = 0, max_iters: int = DEFAULT_MAX_ITERS):
    """Sweep ``lams``; return ``(best_lambda, [(lam, spearman), ...])``.

    Ties keep the smaller lambda.
    """
    results = [(float(lam), code_similarity_spearman(D, sample, lam, n_pairs, seed, max_iters))
               for lam in lams]
    best = max(results, key=lambda r: (r[1], -r[0]))[0]
    return best, results
