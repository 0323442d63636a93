"""Synthetic identity data on the unit sphere, batch assembly and similarity sets."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InsufficientData, InvalidConfig
from .numerics import normalize_rows

_UNIT_TOL = 1e-9


@dataclass(frozen=True)
class IdentityDataset:
    """Unit-norm feature vectors with identity labels in ``[0, n_ids)``."""

    features: np.ndarray
    labels: np.ndarray
    n_ids: int
    seed: Optional[int] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] != labels.shape[0]:
            raise InvalidConfig("features must be (n, d) with one label per row")
        if not np.all(np.isfinite(feats)):
            raise InvalidConfig("features contain non-finite values")
        norms = np.linalg.norm(feats, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            raise InvalidConfig("features must be unit-norm")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_ids):
            raise InvalidConfig("labels out of range")
        counts = np.bincount(labels, minlength=self.n_ids)
        if np.any(counts < 2):
            raise InvalidConfig("every identity needs at least two samples")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def indices_of(self, identity: int) -> np.ndarray:
        return np.flatnonzero(self.labels == identity)


@dataclass(frozen=True)
class PairBatch:
    """One anchor and one gallery sample for each of ``P`` distinct identities.

    ``galleries[k]`` is the positive partner of ``anchors[k]``; every other
    gallery row is a negative for it.
    """

    anchors: np.ndarray
    galleries: np.ndarray
    identities: np.ndarray
    anchor_index: np.ndarray
    gallery_index: np.ndarray

    @property
    def size(self) -> int:
        return self.identities.shape[0]


@dataclass(frozen=True)
class SimilarityPartition:
    positives: np.ndarray
    negatives: np.ndarray


def generate_synthetic(n_ids: int, samples_per_id: int, dim: int, sigma: float,
                       seed: int) -> IdentityDataset:
    """Gaussian clusters around random prototypes, projected back onto the sphere.

    Each prototype is uniform on ``S^{dim-1}``; each sample is
    ``normalize(prototype + sigma * eps)`` with standard normal ``eps``.
    """
    if n_ids < 2 or dim < 2 or samples_per_id < 2:
        raise InvalidConfig("need n_ids >= 2, dim >= 2, samples_per_id >= 2")
    if not np.isfinite(sigma) or sigma < 0:
        raise InvalidConfig("sigma must be finite and non-negative")
    rng = np.random.default_rng(seed)
    protos = normalize_rows(rng.standard_normal((n_ids, dim)))
    noise = rng.standard_normal((n_ids, samples_per_id, dim))
    raw = protos[:, None, :] + sigma * noise
    feats = normalize_rows(raw.reshape(n_ids * samples_per_id, dim))
    labels = np.repeat(np.arange(n_ids), samples_per_id)
    return IdentityDataset(feats, labels, n_ids, seed)


def split_holdout(ds: IdentityDataset, holdout_per_id: int,
                  seed: int) -> tuple[IdentityDataset, IdentityDataset]:
    """Split every identity's samples into a training part and a held-out part.

    Both halves keep the full identity set, so labels stay aligned.
    """
    rng = np.random.default_rng(seed)
    train_idx, hold_idx = [], []
    for i in range(ds.n_ids):
        idx = ds.indices_of(i)
        if idx.size - holdout_per_id < 2 or holdout_per_id < 2:
            raise InsufficientData(
                f"identity {i} has {idx.size} samples; cannot hold out {holdout_per_id}")
        idx = rng.permutation(idx)
        hold_idx.append(np.sort(idx[:holdout_per_id]))
        train_idx.append(np.sort(idx[holdout_per_id:]))
    tr = np.concatenate(train_idx)
    ho = np.concatenate(hold_idx)
    return (IdentityDataset(ds.features[tr], ds.labels[tr], ds.n_ids, ds.seed),
            IdentityDataset(ds.features[ho], ds.labels[ho], ds.n_ids, ds.seed))


def make_pair_batch(ds: IdentityDataset, P: int, seed) -> PairBatch:
    """Draw ``P`` distinct identities and an (anchor, gallery) pair from each.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if P < 2:
        raise InsufficientData("a pair batch needs at least two identities")
    counts = np.bincount(ds.labels, minlength=ds.n_ids)
    eligible = np.flatnonzero(counts >= 2)
    if eligible.size < P:
        raise InsufficientData(f"only {eligible.size} identities with >= 2 samples, need {P}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.sort(rng.choice(eligible, size=P, replace=False))
    a_idx = np.empty(P, dtype=np.int64)
    g_idx = np.empty(P, dtype=np.int64)
    for k, i in enumerate(ids):
        a, g = rng.choice(ds.indices_of(i), size=2, replace=False)
        a_idx[k] = a
        g_idx[k] = g
    return PairBatch(ds.features[a_idx], ds.features[g_idx], ids, a_idx, g_idx)


def partition_similarities(anchor, anchor_label: int, ds: IdentityDataset,
                           anchor_index: Optional[int] = None) -> SimilarityPartition:
    """Positive and negative similarity sets of ``anchor`` against ``ds``.

    ``anchor_index`` marks the anchor's own row in ``ds``; that row is left
    out of both sets.
    """
    sims = np.clip(ds.features @ np.asarray(anchor, dtype=np.float64), -1.0, 1.0)
    keep = np.ones(len(ds), dtype=bool)
    if anchor_index is not None:
        keep[anchor_index] = False
    same = ds.labels == anchor_label
    return SimilarityPartition(sims[keep & same], sims[keep & ~same])


def write_csv(ds: IdentityDataset, path) -> None:
    """Write ``label,f0,...,f{d-1}`` rows with round-trip float formatting."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(ds.dim)])
        for lab, row in zip(ds.labels, ds.features):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


def read_csv(path, n_ids: Optional[int] = None) -> IdentityDataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise InvalidConfig(f"{path}: missing 'label,f0,...' header")
    dim = len(rows[0]) - 1
    expected = ["label"] + [f"f{j}" for j in range(dim)]
    if rows[0] != expected:
        raise InvalidConfig(f"{path}: malformed header")
    body = rows[1:]
    if any(len(r) != dim + 1 for r in body):
        raise InvalidConfig(f"{path}: ragged rows")
    labels = np.array([int(r[0]) for r in body], dtype=np.int64)
    feats = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
    if n_ids is None:
        n_ids = int(labels.max()) + 1 if labels.size else 0
    return IdentityDataset(feats, labels, n_ids)
