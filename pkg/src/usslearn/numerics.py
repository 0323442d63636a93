"""Numerically stable primitives shared by the losses and metrics.

Everything works in float64. ``softplus`` and ``sigmoid`` accept scalars or
arrays and return the same kind.
"""

from __future__ import annotations

import numpy as np

from .errors import LengthMismatch, ZeroNorm

_ZERO_NORM = 1e-30
_SOFTPLUS_CUTOFF = 30.0


def _as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise LengthMismatch(f"expected a non-empty 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite entries")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    Raises:
        ZeroNorm: if ``||v|| < 1e-30``.
    """
    arr = _as_vector(v)
    norm = np.linalg.norm(arr)
    if norm < _ZERO_NORM:
        raise ZeroNorm("cannot normalize a zero vector")
    return arr / norm


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise ``l2_normalize`` for a 2-d array."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms < _ZERO_NORM):
        raise ZeroNorm("cannot normalize a zero row")
    return x / norms


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``, clamped to [-1, 1]."""
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise LengthMismatch(f"length {a.size} != {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < _ZERO_NORM or nb < _ZERO_NORM:
        raise ZeroNorm("cosine similarity of a zero vector")
    # product of norms is commutative, so g(a, b) == g(b, a) bit-for-bit
    value = float(np.dot(a, b)) / (float(na) * float(nb))
    return min(1.0, max(-1.0, value))


def softplus(x):
    """``log(1 + e^x)`` without overflow.

    For ``x > 30`` this is ``x + log1p(e^-x)``, otherwise the direct
    ``log1p(exp(x))``.
    """
    arr = np.asarray(x, dtype=np.float64)
    hi = arr > _SOFTPLUS_CUTOFF
    out = np.asarray(np.log1p(np.exp(np.where(hi, -arr, arr))))
    out[hi] += arr[hi]
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid(x):
    """Logistic function, the derivative of :func:`softplus`."""
    arr = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(arr))
    out = np.where(arr >= 0, 1.0, e) / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


def logsumexp(x) -> float:
    arr = np.asarray(x, dtype=np.float64)
    top = float(np.max(arr))
    return top + float(np.log(np.sum(np.exp(arr - top))))


def softmax(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    e = np.exp(arr - np.max(arr))
    return e / np.sum(e)
