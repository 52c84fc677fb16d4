"""Deterministic numeric primitives used by every other module.

All functions take and return float64 numpy arrays; accumulation is always
done in double precision. Probability vectors ("distributions") are plain
1-D arrays with nonnegative entries summing to 1 within 1e-9.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

CE_EPS = 1e-12  # clamp inside cross_entropy
KL_EPS = 1e-12  # additive smoothing inside kl_divergence

DISTRIBUTION_TOL = 1e-9


def _as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    return arr


def is_distribution(p, tol: float = DISTRIBUTION_TOL) -> bool:
    """True if p is a probability vector: nonnegative, sums to 1 within tol."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
        return False
    return bool(np.all(arr >= 0.0) and abs(arr.sum() - 1.0) <= tol)


def softmax(v) -> np.ndarray:
    """Numerically stable softmax (max-subtraction), shift invariant."""
    arr = _as_vector(v)
    if not np.all(np.isfinite(arr)):
        raise ValueError("softmax input must be finite")
    e = np.exp(arr - arr.max())
    return e / e.sum()


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array (batched helper)."""
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def l2_distance(a, b) -> float:
    """Euclidean distance; symmetric, zero exactly when a == b bitwise."""
    av = _as_vector(a, "a")
    bv = _as_vector(b, "b")
    if av.shape != bv.shape:
        raise ValueError(f"dimension mismatch: {av.shape} vs {bv.shape}")
    d = av - bv
    return float(np.sqrt(np.dot(d, d)))


def kl_divergence(a, b, eps: float = KL_EPS) -> float:
    """KL divergence of a from b, sum(a~ * ln(a~/b~)).

    Both arguments are smoothed as (x + eps) and renormalized before the
    accumulation, so one-hot vectors are handled without log(0). Asymmetric;
    nonnegative up to roundoff (>= -1e-9).
    """
    av = _as_vector(a, "a")
    bv = _as_vector(b, "b")
    if av.shape != bv.shape:
        raise ValueError(f"dimension mismatch: {av.shape} vs {bv.shape}")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    at = av + eps
    at /= at.sum()
    bt = bv + eps
    bt /= bt.sum()
    return float(np.sum(at * (np.log(at) - np.log(bt))))


def sharpen(p) -> np.ndarray:
    """Square-and-renormalize a distribution to boost high-confidence mass.

    Two-step form: f_j = p_j^2 / sum(p), then f / sum(f), so unnormalized
    nonnegative inputs are handled deterministically as well. Preserves the
    argmax and never decreases the maximum entry of a proper distribution.
    """
    arr = _as_vector(p, "p")
    if np.any(arr < 0.0):
        raise ValueError("sharpen input must be nonnegative")
    total = arr.sum()
    if total <= 0.0:
        raise ValueError("sharpen input must have a positive entry")
    f = (arr * arr) / total
    return f / f.sum()


def cross_entropy(p, y: int) -> float:
    """-ln(p[y]) with the probability clamped below at 1e-12."""
    arr = _as_vector(p, "p")
    y = int(y)
    if not 0 <= y < arr.size:
        raise ValueError(f"class index {y} out of range for {arr.size} classes")
    return float(-np.log(max(arr[y], CE_EPS)))


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h*e_i) - f(x-h*e_i)) / 2h."""
    xv = _as_vector(x, "x")
    if h <= 0.0:
        raise ValueError("h must be positive")
    grad = np.empty_like(xv)
    for i in range(xv.size):
        xp = xv.copy()
        xp[i] += h
        xm = xv.copy()
        xm[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value while perturbing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad
