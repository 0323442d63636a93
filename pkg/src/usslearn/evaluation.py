"""Verification metrics and threshold-structure analyses.

Comparator conventions, fixed so numbers are reproducible:

* verification decisions accept a pair when ``score >= threshold``;
* ``tar_at_far`` accepts strictly above its threshold (``score > tau``);
* candidate thresholds for accuracy scans are midpoints of adjacent distinct
  sorted scores.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyScores, InsufficientPairs

DEFAULT_FARS = (1e-4, 1e-3, 1e-2, 1e-1)


@dataclass(frozen=True)
class ScoreSet:
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positives", np.asarray(self.positives, dtype=np.float64).ravel())
        object.__setattr__(self, "negatives", np.asarray(self.negatives, dtype=np.float64).ravel())

    def labeled(self) -> tuple[np.ndarray, np.ndarray]:
        scores = np.concatenate((self.positives, self.negatives))
        labels = np.concatenate((np.ones(self.positives.size, dtype=bool),
                                 np.zeros(self.negatives.size, dtype=bool)))
        return scores, labels


def _require(s: ScoreSet, pos=True, neg=True):
    if (pos and s.positives.size == 0) or (neg and s.negatives.size == 0):
        raise EmptyScores("score set needs positive and negative scores")


def pair_scores(embeddings: np.ndarray, labels: np.ndarray) -> ScoreSet:
    """Similarities of every unordered pair ``i < j``, split by label agreement."""
    E = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    G = np.clip(E @ E.T, -1.0, 1.0)
    iu = np.triu_indices(E.shape[0], 1)
    same = labels[iu[0]] == labels[iu[1]]
    vals = G[iu]
    return ScoreSet(vals[same], vals[~same])


def unified_threshold_check(s: ScoreSet) -> tuple[bool, Optional[tuple[float, float]]]:
    """Whether some ``t`` has ``max(neg) < t <= min(pos)``; returns that interval."""
    _require(s)
    lo = float(np.max(s.negatives))
    hi = float(np.min(s.positives))
    if lo < hi:
        return True, (lo, hi)
    return False, None


def feasibility_margin(s: ScoreSet) -> float:
    _require(s)
    return float(np.min(s.positives) - np.max(s.negatives))


def midpoint_candidates(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    if u.size == 1:
        return u
    return 0.5 * (u[:-1] + u[1:])


def _accuracies(scores: np.ndarray, labels: np.ndarray, taus: np.ndarray) -> np.ndarray:
    # accept when score >= tau; exact counts through searchsorted
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = pos.size - np.searchsorted(pos, taus, side="left")
    tn = np.searchsorted(neg, taus, side="left")
    return (tp + tn) / scores.size


def accuracy_at(scores, labels, tau: float) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    return float(np.mean((scores >= tau) == labels))


def best_threshold(scores, labels) -> float:
    """Lowest midpoint threshold that maximizes accuracy."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    taus = midpoint_candidates(scores)
    acc = _accuracies(scores, labels, taus)
    return float(taus[int(np.argmax(acc))])


def optimal_threshold(positives, negatives) -> float:
    """Accuracy-maximizing midpoint threshold; ties go to the middle tied candidate.

    When the sets are separable the unique maximizer is the midpoint between
    the hardest negative and the weakest positive.
    """
    s = ScoreSet(positives, negatives)
    _require(s)
    scores, labels = s.labeled()
    taus = midpoint_candidates(scores)
    acc = _accuracies(scores, labels, taus)
    best = np.flatnonzero(acc == acc.max())
    return float(taus[best[(best.size - 1) // 2]])


@dataclass
class IdentityThresholds:
    identities: np.ndarray
    thresholds: np.ndarray
    positive: np.ndarray
    hardest_negative: np.ndarray
    seed: int

    def stats(self) -> dict:
        t = self.thresholds
        q1, med, q3 = np.quantile(t, [0.25, 0.5, 0.75])
        return {
            "min": float(t.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(t.max()), "iqr": float(q3 - q1),
            "mean": float(t.mean()), "std": float(t.std()),
        }

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["identity", "optimal_threshold"])
            for i, t in zip(self.identities, self.thresholds):
                w.writerow([int(i), repr(float(t))])


def per_identity_thresholds(embeddings, labels, seed: int = 0) -> IdentityThresholds:
    """Per identity: one positive pair against the galleries of every other identity.

    For identity ``i`` an anchor and a distinct gallery sample are drawn; the
    negatives are the anchor's similarities to the other identities' gallery
    samples (``N - 1`` of them).
    """
    E = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.unique(labels)
    if ids.size < 2:
        raise InsufficientPairs("need at least two identities")
    rng = np.random.default_rng(seed)
    anchors = np.empty(ids.size, dtype=np.int64)
    galleries = np.empty(ids.size, dtype=np.int64)
    for k, i in enumerate(ids):
        members = np.flatnonzero(labels == i)
        if members.size < 2:
            raise InsufficientPairs(f"identity {i} has no positive pair")
        anchors[k], galleries[k] = rng.choice(members, size=2, replace=False)
    S = np.clip(E[anchors] @ E[galleries].T, -1.0, 1.0)
    off = ~np.eye(ids.size, dtype=bool)
    th = np.empty(ids.size)
    hard = np.empty(ids.size)
    for k in range(ids.size):
        negs = S[k][off[k]]
        hard[k] = negs.max()
        th[k] = optimal_threshold([S[k, k]], negs)
    return IdentityThresholds(ids, th, np.diag(S).copy(), hard, seed)


def tar_at_far(s: ScoreSet, far_targets: Sequence[float] = DEFAULT_FARS) -> list[tuple]:
    """``(far, tau, tar)`` rows.

    ``tau`` is the smallest candidate (a negative score, or the float just below
    the lowest negative) whose false-accept fraction ``#{neg > tau} / #neg`` is
    at most the target; ``tar = #{pos > tau} / #pos``.
    """
    _require(s)
    neg = np.sort(s.negatives)
    pos = np.sort(s.positives)
    n = neg.size
    cands = np.concatenate(([np.nextafter(neg[0], -np.inf)], neg))
    fa = n - np.searchsorted(neg, cands, side="right")
    rows = []
    for f in far_targets:
        ok = np.flatnonzero(fa <= f * n)
        tau = float(cands[ok[0]])
        tar = float((pos.size - np.searchsorted(pos, tau, side="right")) / pos.size)
        rows.append((float(f), tau, tar))
    return rows


def kfold_accuracy(scores, labels, k: int = 10, seed: int = 0) -> tuple[float, list[float]]:
    """Pick the best threshold on ``k - 1`` folds, score the held-out fold, repeat.

    Folds are contiguous blocks of a seeded permutation.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n = scores.size
    if k < 2 or n < k or labels.all() or not labels.any():
        raise InsufficientPairs(f"need >= {k} pairs with both labels present")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    accs = []
    for f in range(k):
        test = folds[f]
        train = np.concatenate([folds[j] for j in range(k) if j != f])
        tau = best_threshold(scores[train], labels[train])
        accs.append(accuracy_at(scores[test], labels[test], tau))
    return float(np.mean(accs)), accs


def eer(s: ScoreSet) -> float:
    """Equal error rate from a threshold sweep over every distinct score.

    Operating points are ``FAR = #{neg >= tau}/#neg`` and ``FRR = #{pos < tau}/#pos``;
    between the two points where ``FAR - FRR`` changes sign the crossing is
    linearly interpolated.
    """
    _require(s)
    pos = np.sort(s.positives)
    neg = np.sort(s.negatives)
    taus = np.concatenate((np.unique(np.concatenate((pos, neg))), [np.inf]))
    far = (neg.size - np.searchsorted(neg, taus, side="left")) / neg.size
    frr = np.searchsorted(pos, taus, side="left") / pos.size
    diff = far - frr
    k = int(np.flatnonzero(diff <= 0)[0])
    if diff[k] == 0 or k == 0:
        return float(far[k])
    a = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(far[k - 1] + a * (far[k] - far[k - 1]))


@dataclass
class EvalReport:
    unified_ok: bool
    feasible_interval: Optional[tuple]
    feasibility_margin: float
    per_identity: dict
    tar_at_far: list
    kfold_mean: float
    kfold_folds: list
    eer: float
    learned_t: Optional[float] = None
    accuracy_at_learned_t: Optional[float] = None
    n_positive_pairs: int = 0
    n_negative_pairs: int = 0
    thresholds: Optional[IdentityThresholds] = field(default=None, repr=False)

    def tar(self, far: float) -> float:
        for f, _, t in self.tar_at_far:
            if math.isclose(f, far):
                return t
        raise KeyError(far)

    def to_dict(self) -> dict:
        return {
            "unified_ok": self.unified_ok,
            "feasible_interval": list(self.feasible_interval) if self.feasible_interval else None,
            "feasibility_margin": self.feasibility_margin,
            "learned_t": self.learned_t,
            "accuracy_at_learned_t": self.accuracy_at_learned_t,
            "per_identity_thresholds": self.per_identity,
            "tar_at_far": [{"far": f, "threshold": tau, "tar": t} for f, tau, t in self.tar_at_far],
            "kfold_accuracy": {"mean": self.kfold_mean, "folds": self.kfold_folds},
            "eer": self.eer,
            "n_positive_pairs": self.n_positive_pairs,
            "n_negative_pairs": self.n_negative_pairs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate_embeddings(embeddings, labels, learned_t: Optional[float] = None,
                        far_targets: Sequence[float] = DEFAULT_FARS, k: int = 10,
                        seed: int = 0) -> EvalReport:
    s = pair_scores(embeddings, labels)
    ok, interval = unified_threshold_check(s)
    th = per_identity_thresholds(embeddings, labels, seed)
    scores, lab = s.labeled()
    mean, folds = kfold_accuracy(scores, lab, k, seed)
    acc_t = accuracy_at(scores, lab, learned_t) if learned_t is not None else None
    stats = th.stats()
    stats["thresholds"] = [float(v) for v in th.thresholds]
    return EvalReport(
        unified_ok=ok, feasible_interval=interval, feasibility_margin=feasibility_margin(s),
        per_identity=stats, tar_at_far=tar_at_far(s, far_targets), kfold_mean=mean,
        kfold_folds=folds, eer=eer(s), learned_t=learned_t, accuracy_at_learned_t=acc_t,
        n_positive_pairs=int(s.positives.size), n_negative_pairs=int(s.negatives.size),
        thresholds=th,
    )
