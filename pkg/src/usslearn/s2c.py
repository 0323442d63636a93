"""Sample-to-class margin losses over learnable class proxies.

Proxy rows are assumed unit-norm; the trainer renormalizes them after every
optimizer step, so the loss itself treats ``<x, W_j>`` as the cosine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, ShapeMismatch
from .numerics import normalize_rows
from .s2s import LossOutput

PLAIN = "plain"
COSINE = "cosine"
ANGULAR = "angular"
_KINDS = (PLAIN, COSINE, ANGULAR)
_SINE_FLOOR = 1e-6


@dataclass(frozen=True)
class S2CConfig:
    scale: float = 64.0
    margin: float = 0.35
    kind: str = COSINE

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidConfig(f"unknown sample-to-class kind {self.kind!r}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise InvalidConfig("scale must be positive")
        if self.margin < 0:
            raise InvalidConfig("margin must be non-negative")
        if self.kind == ANGULAR and self.margin >= math.pi / 2:
            raise InvalidConfig("angular margin must lie in [0, pi/2)")


def init_proxies(features: np.ndarray, labels: np.ndarray, n_ids: int, rng=None,
                 mode: str = "mean") -> np.ndarray:
    """Initial proxy matrix: normalized per-identity feature means, or random."""
    if mode == "mean":
        sums = np.zeros((n_ids, features.shape[1]))
        np.add.at(sums, labels, features)
        return normalize_rows(sums)
    if mode == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return normalize_rows(rng.standard_normal((n_ids, features.shape[1])))
    raise InvalidConfig(f"unknown proxy init {mode!r}")


def _target_margin(cos_y: np.ndarray, cfg: S2CConfig):
    """Target logit before scaling and its derivative in ``cos_y``."""
    m = cfg.margin
    if cfg.kind == PLAIN:
        return cos_y, np.ones_like(cos_y)
    if cfg.kind == COSINE:
        return cos_y - m, np.ones_like(cos_y)
    sin_y = np.sqrt(np.clip(1.0 - cos_y * cos_y, 0.0, None))
    phi = cos_y * math.cos(m) - sin_y * math.sin(m)
    dphi = math.cos(m) + math.sin(m) * cos_y / np.maximum(sin_y, _SINE_FLOOR)
    # past theta + m = pi the cosine turns back up; use the linear surrogate
    lin = cos_y < math.cos(math.pi - m)
    phi = np.where(lin, cos_y - m * math.sin(m), phi)
    dphi = np.where(lin, 1.0, dphi)
    return phi, dphi


def _check(X, W, labels):
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"features {X.shape} do not match proxies {W.shape}")
    if labels.shape != (X.shape[0],) or labels.min() < 0 or labels.max() >= W.shape[0]:
        raise ShapeMismatch("labels do not index the proxy matrix")


def s2c_batch_logits(X, W, labels, cfg: S2CConfig) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    _check(X, W, labels)
    cos = X @ W.T
    rows = np.arange(X.shape[0])
    phi, _ = _target_margin(cos[rows, labels], cfg)
    logits = cos.copy()
    logits[rows, labels] = phi
    return cfg.scale * logits


def s2c_logits(x, W, y: int, cfg: S2CConfig) -> np.ndarray:
    """Scaled logits of one feature against every proxy, margin on class ``y``."""
    return s2c_batch_logits(np.asarray(x)[None, :], W, [y], cfg)[0]


def s2c_batch_loss(X, W, labels, cfg: S2CConfig) -> LossOutput:
    """Mean margin cross-entropy over a batch; ``d_x`` is per row, ``d_W`` full."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    _check(X, W, labels)
    n = X.shape[0]
    rows = np.arange(n)
    cos = X @ W.T
    phi, dphi = _target_margin(cos[rows, labels], cfg)
    logits = cos.copy()
    logits[rows, labels] = phi
    logits *= cfg.scale
    top = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - top)
    z = e.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(z[:, 0])
    value = float(np.mean(lse - logits[rows, labels]))
    d_logits = e / z
    d_logits[rows, labels] -= 1.0
    d_cos = cfg.scale * d_logits / n
    d_cos[rows, labels] *= dphi
    return LossOutput(value, d_x=d_cos @ W, d_W=d_cos.T @ X)


def s2c_loss(x, W, y: int, cfg: S2CConfig) -> LossOutput:
    out = s2c_batch_loss(np.asarray(x)[None, :], W, [y], cfg)
    out.d_x = out.d_x[0]
    return out


def _avg(a, b):
    if a is None and b is None:
        return None
    if a is None:
        return 0.5 * b
    if b is None:
        return 0.5 * a
    return 0.5 * (a + b)


def combined_loss(s2c_part: LossOutput, uss_part: LossOutput) -> LossOutput:
    """Plain average of the two losses; every gradient, ``d_b`` included, is averaged."""
    return LossOutput(
        value=0.5 * (s2c_part.value + uss_part.value),
        d_pos=0.5 * (s2c_part.d_pos + uss_part.d_pos),
        d_negs=_avg(s2c_part.d_negs, uss_part.d_negs),
        d_b=0.5 * (s2c_part.d_b + uss_part.d_b),
        d_b_vec=_avg(s2c_part.d_b_vec, uss_part.d_b_vec),
        d_x=_avg(s2c_part.d_x, uss_part.d_x),
        d_W=_avg(s2c_part.d_W, uss_part.d_W),
    )
