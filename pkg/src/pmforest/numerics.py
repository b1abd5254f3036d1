"""Stateless numerical kernels shared by the rest of the package.

Vectors and matrices are plain float64 numpy arrays. Every function validates
its inputs and raises ``ValueError`` on bad shapes or parameters.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_vector",
    "as_matrix",
    "mat_vec",
    "soft_threshold",
    "hard_threshold",
    "threshold",
    "project_l1_ball",
    "prox_linf",
    "make_rng",
]


def as_vector(v, name="vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(a, name="matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def mat_vec(A, x) -> np.ndarray:
    A = as_matrix(A, "A")
    x = as_vector(x, "x")
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: A is {A.shape}, x has dim {x.shape[0]}")
    return A @ x


def _check_beta(beta: float) -> float:
    beta = float(beta)
    if not beta >= 0.0:
        raise ValueError(f"threshold must be non-negative, got {beta}")
    return beta


def soft_threshold(v, beta: float) -> np.ndarray:
    """``sign(v) * max(|v| - beta, 0)`` elementwise."""
    beta = _check_beta(beta)
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - beta, 0.0)


def hard_threshold(v, beta: float) -> np.ndarray:
    """Keep entries with ``|v_i| > beta``, zero the rest."""
    beta = _check_beta(beta)
    v = np.asarray(v, dtype=np.float64)
    return np.where(np.abs(v) > beta, v, 0.0)


def threshold(v, beta, variant: str = "soft") -> np.ndarray:
    """Dispatch to the soft or hard operator.

    ``beta`` may be a scalar or a per-entry array of the same length as ``v``.
    """
    beta_arr = np.asarray(beta, dtype=np.float64)
    if beta_arr.ndim > 0:
        if np.any(beta_arr < 0):
            raise ValueError("threshold must be non-negative")
        v = np.asarray(v, dtype=np.float64)
        if variant == "soft":
            return np.sign(v) * np.maximum(np.abs(v) - beta_arr, 0.0)
        if variant == "hard":
            return np.where(np.abs(v) > beta_arr, v, 0.0)
    elif variant == "soft":
        return soft_threshold(v, float(beta_arr))
    elif variant == "hard":
        return hard_threshold(v, float(beta_arr))
    raise ValueError(f"unknown threshold variant {variant!r}")


def project_l1_ball(v, radius: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{u : sum |u_i| <= radius}``.

    Sort-based exact algorithm, O(m log m). Inputs already inside the ball are
    returned unchanged (as a copy).
    """
    radius = float(radius)
    if not radius > 0.0:
        raise ValueError(f"radius must be positive, got {radius}")
    v = np.asarray(v, dtype=np.float64)
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, u.size + 1)
    rho = np.nonzero(u - (css - radius) / j > 0)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def prox_linf(v, lam: float) -> np.ndarray:
    """Proximal operator of ``lam * ||.||_inf``.

    Closed form: clip ``v`` to ``[-theta, theta]`` where ``theta`` is the level
    at which the clipped-off mass ``sum(max(|v_i| - theta, 0))`` equals ``lam``.
    If ``||v||_1 <= lam`` the result is zero.
    """
    lam = float(lam)
    if not lam > 0.0:
        raise ValueError(f"lambda must be positive, got {lam}")
    v = np.asarray(v, dtype=np.float64)
    a = np.abs(v)
    if a.sum() <= lam:
        return np.zeros_like(v)
    u = np.sort(a.ravel())[::-1]
    css = np.cumsum(u)
    j = np.arange(1, u.size + 1)
    rho = np.nonzero(u - (css - lam) / j > 0)[0][-1]
    theta = (css[rho] - lam) / (rho + 1.0)
    return np.clip(v, -theta, theta)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator: numpy PCG64, bit-identical streams across platforms."""
    if seed is None:
        raise ValueError("an explicit seed is required")
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(seed))
