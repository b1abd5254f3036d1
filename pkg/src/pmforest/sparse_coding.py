"""Dictionaries, layered thresholding and composite (direct-sum / product) coding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .numerics import as_matrix, as_vector, make_rng, threshold

__all__ = [
    "Dictionary",
    "SparseCode",
    "MLCSCStack",
    "CompositeDictionary",
    "random_dictionary",
    "orthonormal_dictionary",
    "incoherent_dictionary",
    "mutual_coherence",
    "convolutional_dictionary",
    "lipschitz",
    "encode_threshold",
    "ml_csc_forward",
    "ml_csc_reconstruct",
    "basis_pursuit",
    "basis_pursuit_batch",
    "compose_direct_sum",
    "compose_product_atoms",
    "hierarchical_csc_encode",
]

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 5000


@dataclass(frozen=True, eq=False)
class Dictionary:
    """``n x m`` matrix with unit-norm columns (atoms)."""

    atoms: np.ndarray

    def __post_init__(self):
        A = np.ascontiguousarray(as_matrix(self.atoms, "atoms"))
        norms = np.linalg.norm(A, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-10):
            raise ValueError("dictionary atoms must have unit l2 norm")
        A.setflags(write=False)
        object.__setattr__(self, "atoms", A)

    @classmethod
    def from_columns(cls, columns) -> "Dictionary":
        """Normalize arbitrary non-zero columns into a dictionary."""
        A = as_matrix(columns, "columns")
        norms = np.linalg.norm(A, axis=0)
        if np.any(norms == 0.0):
            raise ValueError("cannot normalize a zero column")
        return cls(A / norms)

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def m(self) -> int:
        return self.atoms.shape[1]

    def with_atom(self, atom) -> "Dictionary":
        a = as_vector(atom, "atom")
        return Dictionary.from_columns(np.column_stack([self.atoms, a]))

    def __eq__(self, other):
        return isinstance(other, Dictionary) and np.array_equal(self.atoms, other.atoms)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SparseCode:
    coefficients: np.ndarray
    iterations: int = 0
    objective: float = float("nan")
    trace: np.ndarray | None = None

    @property
    def support(self) -> frozenset:
        return frozenset(np.flatnonzero(self.coefficients).tolist())

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.coefficients))


def random_dictionary(n: int, m: int, seed: int) -> Dictionary:
    """Gaussian atoms, normalized."""
    return Dictionary.from_columns(make_rng(seed).standard_normal((n, m)))


def orthonormal_dictionary(n: int, seed: int) -> Dictionary:
    q, r = np.linalg.qr(make_rng(seed).standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    return Dictionary.from_columns(q)


def mutual_coherence(D: Dictionary) -> float:
    """Largest absolute inner product between two distinct atoms."""
    G = np.abs(D.atoms.T @ D.atoms)
    np.fill_diagonal(G, 0.0)
    return float(G.max()) if D.m > 1 else 0.0


def incoherent_dictionary(n: int, m: int, seed: int, coherence: float = 0.3,
                          max_iters: int = 2000) -> Dictionary:
    """Random dictionary pushed below a target mutual coherence.

    Starts from Gaussian atoms and alternates between clipping the Gram
    matrix's off-diagonal entries to ``[-coherence, coherence]`` and projecting
    back onto rank-``n`` positive semidefinite matrices with unit diagonal.
    Raises if the target is below the Welch bound or is not reached.
    """
    if m < n:
        raise ValueError("need m >= n")
    welch = np.sqrt((m - n) / (n * (m - 1))) if m > 1 else 0.0
    if coherence < welch:
        raise ValueError(f"coherence {coherence} is below the Welch bound {welch:.4f} for ({n}, {m})")
    A = make_rng(seed).standard_normal((n, m))
    A /= np.linalg.norm(A, axis=0)
    eye = np.eye(m)
    slack = 1e-9
    for _ in range(int(max_iters)):
        G = A.T @ A
        if np.abs(G - eye).max() <= coherence + slack:
            return Dictionary.from_columns(A)
        G = np.clip(G, -coherence, coherence)
        np.fill_diagonal(G, 1.0)
        w, V = np.linalg.eigh(G)
        A = (V[:, -n:] * np.sqrt(np.maximum(w[-n:], 0.0))).T
        A /= np.linalg.norm(A, axis=0)
    raise ValueError(f"coherence {coherence} not reached in {max_iters} iterations")


def convolutional_dictionary(n: int, kernels_, stride: int = 1) -> Dictionary:
    """Banded Toeplitz dictionary: every kernel placed at every ``stride`` shift (zero boundary)."""
    cols = []
    for ker in kernels_:
        ker = as_vector(ker, "kernel")
        if ker.size > n:
            raise ValueError("kernel longer than the signal")
        for s in range(0, n - ker.size + 1, stride):
            col = np.zeros(n)
            col[s:s + ker.size] = ker
            cols.append(col)
    return Dictionary.from_columns(np.column_stack(cols))


def lipschitz(D: Dictionary) -> float:
    """Largest eigenvalue of ``D^T D``."""
    return float(np.linalg.norm(D.atoms, 2) ** 2)


def encode_threshold(D: Dictionary, x, beta, variant: str = "soft") -> SparseCode:
    """One layer of thresholding: ``P_beta(D^T x)``."""
    x = as_vector(x, "x")
    if x.shape[0] != D.n:
        raise ValueError(f"dimension mismatch: dictionary has n={D.n}, signal has dim {x.shape[0]}")
    return SparseCode(threshold(D.atoms.T @ x, beta, variant))


@dataclass(frozen=True, eq=False)
class MLCSCStack:
    dictionaries: tuple
    thresholds: tuple
    variant: str = "soft"

    def __post_init__(self):
        ds = tuple(self.dictionaries)
        ts = tuple(self.thresholds)
        if not ds or len(ds) != len(ts):
            raise ValueError("need one threshold per dictionary")
        for k in range(1, len(ds)):
            if ds[k].n != ds[k - 1].m:
                raise ValueError(
                    f"layer {k + 1} dictionary has {ds[k].n} rows but layer {k} has {ds[k - 1].m} atoms"
                )
        if self.variant not in ("soft", "hard"):
            raise ValueError(f"unknown threshold variant {self.variant!r}")
        object.__setattr__(self, "dictionaries", ds)
        object.__setattr__(self, "thresholds", ts)

    @property
    def effective(self) -> np.ndarray:
        """The product ``D_1 D_2 ... D_K``."""
        out = self.dictionaries[0].atoms
        for D in self.dictionaries[1:]:
            out = out @ D.atoms
        return out


def ml_csc_forward(stack: MLCSCStack, x) -> list:
    """Layered thresholding, ``Gamma_k = P_{beta_k}(D_k^T Gamma_{k-1})`` with ``Gamma_0 = x``."""
    gamma = as_vector(x, "x")
    out = []
    for D, beta in zip(stack.dictionaries, stack.thresholds):
        code = encode_threshold(D, gamma, beta, stack.variant)
        out.append(code)
        gamma = code.coefficients
    return out


def ml_csc_reconstruct(stack: MLCSCStack, gamma_k) -> np.ndarray:
    g = as_vector(gamma_k, "gamma")
    if g.shape[0] != stack.dictionaries[-1].m:
        raise ValueError("deepest code length does not match the last dictionary")
    for D in reversed(stack.dictionaries):
        g = D.atoms @ g
    return g


def basis_pursuit_batch(D: Dictionary, X, lam: float, max_iters: int = DEFAULT_MAX_ITERS,
                        tol: float = DEFAULT_TOL, lip: float | None = None):
    """Row-wise ISTA for ``0.5 ||D a - x||^2 + lam ||a||_1``.

    Returns ``(codes, iterations, objectives)`` with one row per input signal.
    """
    lam = float(lam)
    if not lam > 0.0:
        raise ValueError(f"lambda must be positive, got {lam}")
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    if not np.all(np.isfinite(X)):
        raise ValueError("signal contains non-finite entries")
    if X.shape[1] != D.n:
        raise ValueError(f"dimension mismatch: dictionary has n={D.n}, signal has dim {X.shape[1]}")
    L = lipschitz(D) if lip is None else float(lip)
    return kernels.ista_l1_batch(D.atoms, X, lam, L, int(max_iters), float(tol), None)


def basis_pursuit(D: Dictionary, x, lam: float, max_iters: int = DEFAULT_MAX_ITERS,
                  tol: float = DEFAULT_TOL, record: bool = False) -> SparseCode:
    """Iterative shrinkage with step ``1/L``.

    Stops after ``max_iters`` or when the relative objective decrease falls
    below ``tol``. A step that would raise the objective is rejected and ends
    the run, so the objective trace is non-increasing.
    """
    lam = float(lam)
    if not lam > 0.0:
        raise ValueError(f"lambda must be positive, got {lam}")
    x = as_vector(x, "x")
    if x.shape[0] != D.n:
        raise ValueError(f"dimension mismatch: dictionary has n={D.n}, signal has dim {x.shape[0]}")
    hist = np.zeros((1, int(max_iters) + 1)) if record else None
    A, it, obj = kernels.ista_l1_batch(D.atoms, np.ascontiguousarray(x[None, :]), lam, lipschitz(D), int(max_iters),
                                       float(tol), hist)
    trace = hist[0, : it[0] + 1].copy() if record else None
    return SparseCode(A[0], int(it[0]), float(obj[0]), trace)


@dataclass(frozen=True, eq=False)
class CompositeDictionary:
    parents: tuple
    mode: str
    atoms: Dictionary
    provenance: tuple = field(default=())

    @property
    def m(self) -> int:
        return self.atoms.m

    @property
    def n(self) -> int:
        return self.atoms.n


def compose_direct_sum(Dx: Dictionary, Dy: Dictionary) -> CompositeDictionary:
    """Block-diagonal ``[[Dx, 0], [0, Dy]]``."""
    A = np.zeros((Dx.n + Dy.n, Dx.m + Dy.m))
    A[: Dx.n, : Dx.m] = Dx.atoms
    A[Dx.n:, Dx.m:] = Dy.atoms
    prov = tuple(("x", i) for i in range(Dx.m)) + tuple(("y", j) for j in range(Dy.m))
    return CompositeDictionary((Dx, Dy), "direct_sum", Dictionary(A), prov)


def _pair_usage(Dx: Dictionary, Dy: Dictionary, train, lam: float):
    """Co-activation counts of (x-atom, y-atom) pairs under direct-sum coding."""
    ds = compose_direct_sum(Dx, Dy)
    codes, _, _ = basis_pursuit_batch(ds.atoms, train, lam)
    ax = codes[:, : Dx.m]
    ay = codes[:, Dx.m:]
    nzx = (ax != 0).astype(np.float64)
    nzy = (ay != 0).astype(np.float64)
    counts = nzx.T @ nzy
    weight = np.abs(ax).T @ np.abs(ay)
    return counts, weight


def compose_product_atoms(Dx: Dictionary, Dy: Dictionary, max_atoms: int | None = None,
                          train=None, lam: float = 0.05) -> CompositeDictionary:
    """Atoms ``[Dx_i; Dy_j] / sqrt(2)`` for every pair (i, j), or the most used pairs.

    When ``Dx.m * Dy.m`` exceeds ``max_atoms`` the pairs are ranked by how often
    they co-activate when ``train`` (rows are stacked ``[x; y]`` signals) is
    coded against the direct-sum dictionary; ties are broken by summed
    coefficient magnitude, then by index.
    """
    total = Dx.m * Dy.m
    if max_atoms is None:
        max_atoms = total
    if int(max_atoms) < 1:
        raise ValueError("max_atoms must be >= 1")
    pairs = [(i, j) for i in range(Dx.m) for j in range(Dy.m)]
    if total > max_atoms:
        if train is None or len(np.atleast_2d(train)) == 0:
            raise ValueError("pruning the pair set needs a non-empty training sample")
        train = np.atleast_2d(np.asarray(train, dtype=np.float64))
        counts, weight = _pair_usage(Dx, Dy, train, lam)
        ranked = sorted(pairs, key=lambda ij: (-counts[ij], -weight[ij], ij))
        pairs = sorted(ranked[: int(max_atoms)])
    if Dx.n == Dy.n:
        cols = [np.concatenate([Dx.atoms[:, i], Dy.atoms[:, j]]) / np.sqrt(2.0) for i, j in pairs]
        atoms = Dictionary.from_columns(np.column_stack(cols))
    else:
        atoms = Dictionary.from_columns(
            np.column_stack([np.concatenate([Dx.atoms[:, i], Dy.atoms[:, j]]) for i, j in pairs])
        )
    return CompositeDictionary((Dx, Dy), "product", atoms, tuple(pairs))


def hierarchical_csc_encode(signal, composite, lam: float, **kwargs) -> SparseCode:
    """Basis pursuit of a stacked signal against a composite dictionary.

    Composites of composites (pass ``composite.atoms`` as a parent) give the
    recursive ``R^n -> R^2n -> R^4n`` construction.
    """
    D = composite.atoms if isinstance(composite, CompositeDictionary) else composite
    return basis_pursuit(D, signal, lam, **kwargs)
