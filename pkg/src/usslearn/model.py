"""Fully-connected embedding network with hand-written backprop, SGD and LR schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidConfig, ShapeMismatch, StaleCache, ZeroNorm


class EmbeddingNet:
    """Affine layers with ReLU between them; the output is L2-normalized.

    Parameters live in ``self.params`` as ``W0, b0, W1, b1, ...`` with
    ``W_k`` of shape ``(out, in)``.
    """

    def __init__(self, sizes: Sequence[int], seed: int = 0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise InvalidConfig(f"bad layer sizes {sizes}")
        self.sizes = sizes
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"W{k}"] = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
            self.params[f"b{k}"] = np.zeros(fan_out)
        self.version = 0
        self._cache = None

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.sizes[0]:
            raise ShapeMismatch(f"input shape {X.shape}, network expects (*, {self.sizes[0]})")
        inputs, pre = [], []
        h = X
        for k in range(self.n_layers):
            inputs.append(h)
            z = h @ self.params[f"W{k}"].T + self.params[f"b{k}"]
            pre.append(z)
            h = np.maximum(z, 0.0) if k < self.n_layers - 1 else z
        norms = np.linalg.norm(h, axis=1, keepdims=True)
        if np.any(norms < 1e-30):
            raise ZeroNorm("network output is the zero vector for some input")
        out = h / norms
        self._cache = (self.version, inputs, pre, out, norms)
        return out

    __call__ = forward

    def kink_distance(self) -> float:
        """Smallest |pre-activation| of any hidden unit in the last forward pass."""
        if self._cache is None or self.n_layers == 1:
            return float("inf")
        return float(min(np.min(np.abs(z)) for z in self._cache[2][:-1]))

    def backward(self, d_out) -> dict[str, np.ndarray]:
        """Parameter gradients for upstream gradient ``d_out`` on the normalized output."""
        if self._cache is None or self._cache[0] != self.version:
            raise StaleCache("backward needs a forward pass on the current parameters")
        _, inputs, pre, out, norms = self._cache
        d_out = np.asarray(d_out, dtype=np.float64)
        if d_out.shape != out.shape:
            raise ShapeMismatch(f"upstream gradient {d_out.shape} != output {out.shape}")
        # Jacobian of z / |z| is (I - y y^T) / |z|
        radial = np.sum(d_out * out, axis=1, keepdims=True)
        dz = (d_out - out * radial) / norms
        grads = {}
        for k in reversed(range(self.n_layers)):
            if k < self.n_layers - 1:
                dz = dz * (pre[k] > 0)
            grads[f"W{k}"] = dz.T @ inputs[k]
            grads[f"b{k}"] = dz.sum(axis=0)
            dz = dz @ self.params[f"W{k}"]
        return grads

    def bump(self) -> None:
        """Mark parameters as changed, invalidating any cached forward pass."""
        self.version += 1


@dataclass
class SGD:
    """SGD with heavy-ball momentum and coupled weight decay.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Names in ``no_decay`` skip the decay term; ``lr_scale`` multiplies the
    step of individual parameters.
    """

    momentum: float = 0.9
    weight_decay: float = 5e-4
    no_decay: frozenset = frozenset()
    lr_scale: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float) -> None:
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ShapeMismatch(f"{name}: gradient {g.shape} != parameter {p.shape}")
            if name not in self.no_decay and self.weight_decay:
                g = g + self.weight_decay * p
            buf = self.buffers.get(name)
            if buf is None:
                buf = np.zeros_like(p)
                self.buffers[name] = buf
            buf *= self.momentum
            buf += g
            p -= lr * self.lr_scale.get(name, 1.0) * buf


def sgd_step(params: dict, grads: dict, state: SGD, lr: float) -> dict:
    """Apply one in-place SGD update and return ``params``."""
    state.step(params, grads, lr)
    return params


STEP = "step"
POLY = "poly"
WARMUP_POLY = "warmup_poly"


@dataclass(frozen=True)
class LrSchedule:
    """Learning-rate schedule. ``base`` is the initial (or peak, with warmup) rate.

    ``milestones`` and ``warmup`` are in the same unit as the ``step`` passed
    to :func:`lr_at`; the trainer uses fractional epochs. A nonzero ``warmup``
    also ramps the step schedule linearly from 0.
    """

    kind: str = STEP
    base: float = 0.1
    milestones: tuple = (16, 24)
    factor: float = 10.0
    power: float = 2.0
    warmup: float = 0.0

    def __post_init__(self):
        if self.kind not in (STEP, POLY, WARMUP_POLY):
            raise InvalidConfig(f"unknown schedule {self.kind!r}")
        if self.base < 0 or self.factor <= 0:
            raise InvalidConfig("schedule needs base >= 0 and factor > 0")


def lr_at(schedule: LrSchedule, step: float, total_steps: float) -> float:
    if not (0 <= step <= total_steps):
        raise InvalidConfig(f"step {step} outside [0, {total_steps}]")
    if schedule.kind == STEP:
        if step < schedule.warmup:
            return schedule.base * step / schedule.warmup
        passed = sum(1 for m in schedule.milestones if step >= m)
        return schedule.base * schedule.factor ** (-passed)
    if schedule.kind == POLY:
        if total_steps == 0:
            return schedule.base
        return schedule.base * (1.0 - step / total_steps) ** schedule.power
    w = schedule.warmup
    if step < w:
        return schedule.base * step / w
    rest = total_steps - w
    if rest <= 0:
        return schedule.base
    return schedule.base * (1.0 - (step - w) / rest) ** schedule.power


def default_sizes(d_in: int, d_out: int, hidden: Optional[Sequence[int]] = None) -> list[int]:
    hidden = [128] if hidden is None else list(hidden)
    return [d_in, *hidden, d_out]
