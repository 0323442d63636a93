"""Training loop, batch objectives for every preset, and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import (BCE_PRESETS, S2C_PRESETS, S2S_PRESETS, THRESHOLD_PRESETS,
                     ExperimentConfig)
from .errors import InvalidConfig, ShapeMismatch, VersionMismatch
from .model import SGD, EmbeddingNet, LrSchedule, lr_at
from .numerics import normalize_rows
from .pairing import (IdentityDataset, generate_synthetic, make_pair_batch, read_csv,
                      split_holdout)
from .s2c import S2CConfig, init_proxies, s2c_batch_loss
from .s2s import (LossConfig, SimilarityRow, ThresholdParams, naive_loss,
                  s2s_bce_loss, s2s_softmax_loss, uss_loss)

CHECKPOINT_FORMAT = "usslearn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class BatchGrads:
    value: float
    d_anchors: np.ndarray
    d_galleries: np.ndarray
    d_W: Optional[np.ndarray] = None
    d_b: float = 0.0
    d_b_vec: Optional[np.ndarray] = None


def _s2s_rows(preset, S, ids, loss_cfg, b, b_vec):
    P = S.shape[0]
    off = ~np.eye(P, dtype=bool)
    dS = np.zeros_like(S)
    value = 0.0
    d_b = 0.0
    d_b_vec = None if b_vec is None else np.zeros_like(b_vec)
    kind = preset.split("-")[0]
    for k in range(P):
        row = SimilarityRow(S[k, k], S[k][off[k]])
        if kind == "naive":
            out = naive_loss(row, loss_cfg)
        elif kind in ("uss", "unitsface"):
            out = uss_loss(row, b, loss_cfg)
        elif kind == "soft":
            out = s2s_softmax_loss(row, loss_cfg)
        else:
            out = s2s_bce_loss(row, int(ids[k]), ids[off[k]],
                               ThresholdParams.per_identity(b_vec, loss_cfg.gamma), loss_cfg)
        value += out.value / P
        dS[k, k] += out.d_pos / P
        dS[k][off[k]] += out.d_negs / P
        d_b += out.d_b / P
        if out.d_b_vec is not None:
            d_b_vec += out.d_b_vec / P
    return value, dS, d_b, d_b_vec


def batch_objective(preset: str, A, G, ids, loss_cfg: LossConfig,
                    s2c_cfg: Optional[S2CConfig] = None, W=None, b: Optional[float] = None,
                    b_vec=None) -> BatchGrads:
    """Mean loss of one pair batch and its gradients w.r.t. the embeddings.

    ``A[k]``/``G[k]`` are the anchor and gallery embeddings of identity ``ids[k]``.
    Sample-to-sample terms average over anchors; the sample-to-class term
    averages over all ``2P`` embeddings; ``unitsface`` averages the two.
    """
    A = np.asarray(A, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    value = 0.0
    dA = np.zeros_like(A)
    dG = np.zeros_like(G)
    d_W = None
    d_b = 0.0
    d_b_vec = None
    weight = 0.5 if preset == "unitsface" else 1.0
    if preset in S2S_PRESETS:
        S = A @ G.T
        v, dS, db, dbv = _s2s_rows(preset, S, ids, loss_cfg, b, b_vec)
        value += weight * v
        dA += weight * (dS @ G)
        dG += weight * (dS.T @ A)
        d_b = weight * db
        if dbv is not None:
            d_b_vec = weight * dbv
    if preset in S2C_PRESETS:
        X = np.vstack((A, G))
        out = s2c_batch_loss(X, W, np.concatenate((ids, ids)), s2c_cfg)
        P = A.shape[0]
        value += weight * out.value
        dA += weight * out.d_x[:P]
        dG += weight * out.d_x[P:]
        d_W = weight * out.d_W
    return BatchGrads(value, dA, dG, d_W, d_b, d_b_vec)


@dataclass
class TrainState:
    """Everything a run mutates: network, thresholds, proxies, optimizer, batch RNG."""

    config: ExperimentConfig
    net: EmbeddingNet
    n_ids: int
    b: Optional[np.ndarray] = None
    b_vec: Optional[np.ndarray] = None
    W: Optional[np.ndarray] = None
    optimizer: SGD = field(default_factory=SGD)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    epoch: int = 0
    log: list = field(default_factory=list)

    @property
    def loss_cfg(self) -> LossConfig:
        return LossConfig(gamma=self.config.gamma, margin=self.config.s2s_margin)

    @property
    def s2c_cfg(self) -> Optional[S2CConfig]:
        kind = self.config.s2c_kind
        if kind is None:
            return None
        return S2CConfig(scale=self.config.scale, margin=self.config.resolved_margin_c, kind=kind)

    @property
    def learned_t(self) -> Optional[float]:
        if self.b is None:
            return None
        return float(self.b[0]) / self.config.gamma

    def thresholds(self) -> Optional[ThresholdParams]:
        if self.b is not None:
            return ThresholdParams.unified(float(self.b[0]), self.config.gamma)
        if self.b_vec is not None:
            return ThresholdParams.per_identity(self.b_vec.copy(), self.config.gamma)
        return None

    def params(self) -> dict:
        p = dict(self.net.params)
        if self.W is not None:
            p["proxies"] = self.W
        if self.b is not None:
            p["b"] = self.b
        if self.b_vec is not None:
            p["b_vec"] = self.b_vec
        return p

    def embed(self, X) -> np.ndarray:
        return self.net.forward(X)


def _seeds(seed: int):
    net_ss, batch_ss, probe_ss = np.random.SeedSequence(seed).spawn(3)
    return (int(net_ss.generate_state(1)[0]), np.random.default_rng(batch_ss),
            int(probe_ss.generate_state(1)[0]))


def init_state(cfg: ExperimentConfig, train_ds: IdentityDataset) -> TrainState:
    net_seed, batch_rng, _ = _seeds(cfg.seed)
    net = EmbeddingNet([train_ds.dim, *cfg.hidden, cfg.embed_dim], seed=net_seed)
    state = TrainState(cfg, net, train_ds.n_ids, rng=batch_rng)
    if cfg.preset in THRESHOLD_PRESETS:
        state.b = np.zeros(1)
    if cfg.preset in BCE_PRESETS:
        state.b_vec = np.zeros(train_ds.n_ids)
    if cfg.preset in S2C_PRESETS:
        feats = net.forward(train_ds.features)
        init_rng = np.random.default_rng(net_seed + 1)
        state.W = init_proxies(feats, train_ds.labels, train_ds.n_ids, init_rng, cfg.proxy_init)
    no_decay = frozenset({"b", "b_vec"})
    state.optimizer = SGD(momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                          no_decay=no_decay,
                          lr_scale={"b": cfg.threshold_lr_scale, "b_vec": cfg.threshold_lr_scale})
    return state


def schedule_of(cfg: ExperimentConfig) -> LrSchedule:
    return LrSchedule(kind=cfg.schedule, base=cfg.lr, milestones=tuple(cfg.milestones),
                      power=cfg.power, warmup=cfg.warmup)


def steps_per_epoch(cfg: ExperimentConfig, train_ds: IdentityDataset) -> int:
    if cfg.steps_per_epoch is not None:
        return cfg.steps_per_epoch
    P = min(cfg.batch_ids, train_ds.n_ids)
    return max(1, math.ceil(len(train_ds) / (2 * P)))


def train_step(state: TrainState, batch, lr: float) -> float:
    X = np.vstack((batch.anchors, batch.galleries))
    E = state.net.forward(X)
    P = batch.size
    out = batch_objective(state.config.preset, E[:P], E[P:], batch.identities, state.loss_cfg,
                          state.s2c_cfg, state.W,
                          None if state.b is None else float(state.b[0]), state.b_vec)
    grads = state.net.backward(np.vstack((out.d_anchors, out.d_galleries)))
    if state.W is not None:
        grads["proxies"] = out.d_W
    if state.b is not None:
        grads["b"] = np.array([out.d_b])
    if state.b_vec is not None:
        grads["b_vec"] = out.d_b_vec
    state.optimizer.step(state.params(), grads, lr)
    state.net.bump()
    if state.W is not None and lr != 0.0:
        # a zero step leaves the proxies exactly unit; renormalizing would shift ulps
        state.W[...] = normalize_rows(state.W)
    return out.value


def probe_margin(state: TrainState, probe) -> float:
    """``min(pos) - max(neg)`` of the current embeddings on a fixed pair batch."""
    A = state.net.forward(probe.anchors)
    G = state.net.forward(probe.galleries)
    S = A @ G.T
    off = ~np.eye(S.shape[0], dtype=bool)
    return float(np.min(np.diag(S)) - np.max(S[off]))


def train(cfg: ExperimentConfig, train_ds: IdentityDataset,
          probe_ds: Optional[IdentityDataset] = None, state: Optional[TrainState] = None,
          progress=None) -> TrainState:
    """Run ``cfg.epochs`` epochs of SGD and return the final state.

    Each log row records the epoch's mean loss, the learning rate at its last
    step, ``t = b / gamma`` (unified thresholds only) and the feasibility
    margin on a fixed probe batch drawn from ``probe_ds`` (or the training set).
    """
    state = init_state(cfg, train_ds) if state is None else state
    probe_src = probe_ds if probe_ds is not None else train_ds
    _, _, probe_seed = _seeds(cfg.seed)
    probe = make_pair_batch(probe_src, min(cfg.batch_ids, probe_src.n_ids), probe_seed)
    P = min(cfg.batch_ids, train_ds.n_ids)
    steps = steps_per_epoch(cfg, train_ds)
    sched = schedule_of(cfg)
    while state.epoch < cfg.epochs:
        losses = []
        lr = 0.0
        for it in range(steps):
            lr = lr_at(sched, state.epoch + it / steps, cfg.epochs)
            batch = make_pair_batch(train_ds, P, state.rng)
            losses.append(train_step(state, batch, lr))
        state.epoch += 1
        row = {
            "epoch": state.epoch,
            "loss": float(np.mean(losses)),
            "lr": lr,
            "t": state.learned_t,
            "feasibility_margin": probe_margin(state, probe),
        }
        state.log.append(row)
        if progress is not None:
            progress(row)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _arr(a):
    return None if a is None else {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unarr(d):
    if d is None:
        return None
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def checkpoint_dict(state: TrainState) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "layer_sizes": state.net.sizes,
        "n_ids": state.n_ids,
        "epoch": state.epoch,
        "gamma": state.config.gamma,
        "margin": state.config.s2s_margin,
        "params": {k: _arr(v) for k, v in state.net.params.items()},
        "b": None if state.b is None else float(state.b[0]),
        "b_vec": None if state.b_vec is None else [float(v) for v in state.b_vec],
        "proxies": _arr(state.W),
        "optimizer": {
            "momentum": state.optimizer.momentum,
            "weight_decay": state.optimizer.weight_decay,
            "buffers": {k: _arr(v) for k, v in sorted(state.optimizer.buffers.items())},
        },
        "rng_state": state.rng.bit_generator.state,
        "log": state.log,
    }


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(state), indent=1), encoding="utf-8")


def load_checkpoint(path) -> TrainState:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format") != CHECKPOINT_FORMAT:
        raise VersionMismatch(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if data.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {data.get('version')}, "
                              f"expected {CHECKPOINT_VERSION}")
    cfg = ExperimentConfig.from_dict(data["config"])
    net = EmbeddingNet(data["layer_sizes"], seed=0)
    for k, v in data["params"].items():
        arr = _unarr(v)
        if arr.shape != net.params[k].shape:
            raise ShapeMismatch(f"checkpoint parameter {k} has shape {arr.shape}")
        net.params[k] = arr
    rng = np.random.default_rng()
    rng.bit_generator.state = data["rng_state"]
    opt = data["optimizer"]
    state = TrainState(
        cfg, net, data["n_ids"],
        b=None if data["b"] is None else np.array([data["b"]]),
        b_vec=None if data["b_vec"] is None else np.array(data["b_vec"], dtype=np.float64),
        W=_unarr(data["proxies"]),
        optimizer=SGD(momentum=opt["momentum"], weight_decay=opt["weight_decay"],
                      no_decay=frozenset({"b", "b_vec"}),
                      lr_scale={"b": cfg.threshold_lr_scale, "b_vec": cfg.threshold_lr_scale},
                      buffers={k: _unarr(v) for k, v in opt["buffers"].items()}),
        rng=rng, epoch=data["epoch"], log=data["log"],
    )
    return state


def check_input_dim(state: TrainState, ds: IdentityDataset) -> None:
    if ds.dim != state.net.sizes[0]:
        raise ShapeMismatch(f"dataset dimension {ds.dim} != network input {state.net.sizes[0]}")
    if ds.n_ids > state.n_ids and state.W is not None:
        raise InvalidConfig("dataset has more identities than the checkpoint's proxies")


def experiment_data(cfg: ExperimentConfig) -> tuple[IdentityDataset, IdentityDataset]:
    """The run's dataset (CSV or synthetic) split into training and held-out parts."""
    if cfg.data_csv:
        ds = read_csv(cfg.data_csv)
    else:
        ds = generate_synthetic(cfg.n_ids, cfg.samples_per_id, cfg.dim, cfg.sigma,
                                seed=cfg.resolved_data_seed)
    return split_holdout(ds, cfg.holdout_per_id, seed=cfg.resolved_data_seed)
