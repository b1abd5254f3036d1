"""Synthetic datasets and the on-disk vector formats.

fvecs layout: per vector, a little-endian int32 ``dim`` followed by ``dim``
little-endian float32 values. CSV layout: a first line ``dim=<d>`` followed by
one comma-separated vector per line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import make_rng

__all__ = [
    "KINDS",
    "DatasetSpec",
    "Dataset",
    "generate",
    "read_fvecs",
    "write_fvecs",
    "read_csv",
    "write_csv",
    "read_vectors",
    "write_vectors",
]

KINDS = ("GaussianClusters", "TwoMoons", "Torus", "ProductManifold", "FromFile")

# 2-D factor curves for ProductManifold, parametrized by t in [0, 1)
_CURVES = {
    "circle": lambda t: np.c_[np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)],
    "segment": lambda t: np.c_[2 * t - 1, np.zeros_like(t)],
    "arc": lambda t: np.c_[np.cos(np.pi * t), np.sin(np.pi * t)],
    "figure8": lambda t: np.c_[np.sin(2 * np.pi * t), np.sin(4 * np.pi * t) / 2],
}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    n_points: int
    dim: int | None = None
    noise_sigma: float = 0.0
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.kind != "FromFile" and int(self.n_points) < 1:
            raise ValueError("n_points must be >= 1")
        if not self.noise_sigma >= 0.0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass(eq=False)
class Dataset:
    points: np.ndarray
    labels: np.ndarray | None = None


def _moons(n, rng):
    # label 0: upper half circle; label 1: shifted lower half circle
    labels = rng.integers(0, 2, n)
    t = rng.uniform(0.0, np.pi, n)
    x = np.where(labels == 0, np.cos(t), 1.0 - np.cos(t))
    y = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
    return np.c_[x, y], labels


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministic points (and labels where meaningful) for ``spec``."""
    if spec.kind == "FromFile":
        path = spec.params.get("path")
        if not path:
            raise ValueError("FromFile needs params['path']")
        X = read_vectors(path)
        if spec.dim is not None and X.shape[1] != spec.dim:
            raise ValueError(f"file has dim {X.shape[1]}, spec says {spec.dim}")
        if spec.n_points:
            X = X[: int(spec.n_points)]
        return Dataset(X)

    rng = make_rng(spec.seed)
    n = int(spec.n_points)
    labels = None
    if spec.kind == "GaussianClusters":
        d = int(spec.dim or 2)
        k = int(spec.params.get("n_clusters", 3))
        if k < 1 or d < 1:
            raise ValueError("need n_clusters >= 1 and dim >= 1")
        centers = float(spec.params.get("center_scale", 5.0)) * rng.standard_normal((k, d))
        labels = rng.integers(0, k, n)
        X = centers[labels] + rng.standard_normal((n, d))
    elif spec.kind == "TwoMoons":
        if spec.dim not in (None, 2):
            raise ValueError("TwoMoons is 2-dimensional")
        X, labels = _moons(n, rng)
    elif spec.kind == "Torus":
        if spec.dim not in (None, 4):
            raise ValueError("Torus lives in R^4")
        th = rng.uniform(0.0, 2 * np.pi, n)
        ph = rng.uniform(0.0, 2 * np.pi, n)
        X = np.c_[np.cos(th), np.sin(th), np.cos(ph), np.sin(ph)]
    else:
        factors = tuple(spec.params.get("factors", ("circle", "circle")))
        bad = [f for f in factors if f not in _CURVES]
        if bad or not factors:
            raise ValueError(f"unknown factor curves {bad}; choose from {sorted(_CURVES)}")
        if spec.dim not in (None, 2 * len(factors)):
            raise ValueError(f"{len(factors)} planar factors give dim {2 * len(factors)}, spec says {spec.dim}")
        X = np.hstack([_CURVES[f](rng.uniform(0.0, 1.0, n)) for f in factors])
    if spec.noise_sigma > 0.0:
        X = X + spec.noise_sigma * rng.standard_normal(X.shape)
    return Dataset(np.ascontiguousarray(X, dtype=np.float64), labels)


def write_fvecs(path, X):
    X = np.atleast_2d(np.asarray(X, dtype="<f4"))
    n, d = X.shape
    rec = np.empty((n, d + 1), dtype="<f4")
    rec[:, 0] = np.array([d], dtype="<i4").view("<f4")[0]
    rec[:, 1:] = X
    Path(path).write_bytes(rec.tobytes())


def read_fvecs(path) -> np.ndarray:
    raw = np.fromfile(path, dtype="<i4")
    if raw.size == 0:
        return np.zeros((0, 0))
    d = int(raw[0])
    if d < 1 or raw.size % (d + 1):
        raise ValueError(f"{path}: malformed fvecs file")
    rec = raw.reshape(-1, d + 1)
    if np.any(rec[:, 0] != d):
        raise ValueError(f"{path}: vectors of mixed dimension")
    return rec[:, 1:].view("<f4").astype(np.float64)


def write_csv(path, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    np.savetxt(path, X, delimiter=",", fmt="%.17g", header=f"dim={X.shape[1]}", comments="")


def read_csv(path) -> np.ndarray:
    with open(path) as fh:
        head = fh.readline().strip()
        if not head.startswith("dim="):
            raise ValueError(f"{path}: CSV vectors need a 'dim=<d>' header line")
        d = int(head[4:])
        rows = [line for line in fh if line.strip()]
    if not rows:
        return np.zeros((0, d))
    X = np.loadtxt(rows, delimiter=",", ndmin=2)
    if X.shape[1] != d:
        raise ValueError(f"{path}: header says dim {d}, rows have {X.shape[1]} values")
    return X


def read_vectors(path) -> np.ndarray:
    return read_csv(path) if str(path).endswith(".csv") else read_fvecs(path)


def write_vectors(path, X):
    (write_csv if str(path).endswith(".csv") else write_fvecs)(path, X)
