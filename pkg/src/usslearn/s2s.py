"""Sample-to-sample losses over similarity rows, with analytic gradients.

A :class:`SimilarityRow` holds the similarity of an anchor to its positive
partner and to ``N - 1`` negatives. Every loss returns a :class:`LossOutput`
whose gradients are taken with respect to those similarities (and the
threshold parameters where present); mapping them back to embeddings is the
trainer's job.

Margins are applied to the positive similarity only, for every marginal
variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import IdMismatch, InsufficientData, InvalidConfig
from .numerics import logsumexp, sigmoid, softmax, softplus
from .pairing import IdentityDataset, partition_similarities

LOG2 = math.log(2.0)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 64.0
    margin: float = 0.0

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise InvalidConfig("gamma must be positive and finite")
        if not (0.0 <= self.margin < 2.0):
            raise InvalidConfig("margin must lie in [0, 2)")


@dataclass(frozen=True)
class ThresholdParams:
    """Learnable threshold ``b = gamma * t``: one scalar, or one per identity."""

    gamma: float
    b: Optional[float] = None
    b_vec: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.b is None) == (self.b_vec is None):
            raise InvalidConfig("give exactly one of b (unified) or b_vec (per identity)")
        if self.b is not None and not math.isfinite(self.b):
            raise InvalidConfig("b must be finite")
        if self.b_vec is not None:
            vec = np.asarray(self.b_vec, dtype=np.float64)
            if vec.ndim != 1 or not np.all(np.isfinite(vec)):
                raise InvalidConfig("b_vec must be a finite 1-d array")
            object.__setattr__(self, "b_vec", vec)

    @classmethod
    def unified(cls, b: float, gamma: float) -> "ThresholdParams":
        return cls(gamma=gamma, b=float(b))

    @classmethod
    def per_identity(cls, b_vec, gamma: float) -> "ThresholdParams":
        return cls(gamma=gamma, b_vec=np.asarray(b_vec, dtype=np.float64))

    @property
    def mode(self) -> str:
        return "unified" if self.b is not None else "per_identity"

    @property
    def t(self):
        if self.b is not None:
            return self.b / self.gamma
        return self.b_vec / self.gamma


@dataclass(frozen=True)
class SimilarityRow:
    pos: float
    negs: np.ndarray

    def __post_init__(self):
        negs = np.clip(np.atleast_1d(np.asarray(self.negs, dtype=np.float64)), -1.0, 1.0)
        if negs.ndim != 1 or negs.size == 0:
            raise InvalidConfig("a similarity row needs at least one negative")
        if not (np.all(np.isfinite(negs)) and math.isfinite(self.pos)):
            raise InvalidConfig("similarities must be finite")
        object.__setattr__(self, "pos", min(1.0, max(-1.0, float(self.pos))))
        object.__setattr__(self, "negs", negs)

    @property
    def n_ids(self) -> int:
        """Number of identities the row spans (one positive plus the negatives)."""
        return self.negs.size + 1


@dataclass
class LossOutput:
    """Loss value plus whichever gradients the loss defines.

    ``d_pos``/``d_negs`` are with respect to similarities, ``d_b``/``d_b_vec``
    with respect to the threshold, ``d_x``/``d_W`` with respect to a feature
    and the class proxies.
    """

    value: float
    d_pos: float = 0.0
    d_negs: Optional[np.ndarray] = None
    d_b: float = 0.0
    d_b_vec: Optional[np.ndarray] = None
    d_x: Optional[np.ndarray] = None
    d_W: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


def _row(row) -> SimilarityRow:
    if isinstance(row, SimilarityRow):
        return row
    pos, negs = row
    return SimilarityRow(pos, negs)


def naive_loss(row, cfg: LossConfig) -> LossOutput:
    """``-gamma * g_pos + gamma * mean(g_neg)``."""
    row = _row(row)
    g = cfg.gamma
    k = row.negs.size
    value = -g * row.pos + (g / k) * float(np.sum(row.negs))
    return LossOutput(value, d_pos=-g, d_negs=np.full(k, g / k))


def naive_loss_full(anchor, anchor_label: int, ds: IdentityDataset, cfg: LossConfig,
                    anchor_index: Optional[int] = None) -> float:
    """Naive loss against every other sample of the dataset instead of a single row."""
    part = partition_similarities(anchor, anchor_label, ds, anchor_index)
    if part.positives.size == 0 or part.negatives.size == 0:
        raise InsufficientData("anchor needs at least one positive and one negative")
    g = cfg.gamma
    return -g * float(np.mean(part.positives)) + g * float(np.mean(part.negatives))


def _threshold_loss(pos_arg: float, neg_args: np.ndarray):
    # shared by USS and BCE so that tied thresholds reproduce USS exactly
    value = softplus(pos_arg) + float(np.sum(softplus(neg_args)))
    return value, sigmoid(pos_arg), sigmoid(neg_args)


def _unified_b(thr) -> float:
    if isinstance(thr, ThresholdParams):
        if thr.mode != "unified":
            raise InvalidConfig("USS loss needs a unified threshold")
        return thr.b
    return float(thr)


def uss_loss(row, thr: Union[ThresholdParams, float], cfg: LossConfig) -> LossOutput:
    """Unified-threshold loss; ``cfg.margin > 0`` gives the marginal variant.

    ``softplus(-gamma*(g_pos - m) + b) + sum_j softplus(gamma*g_neg_j - b)``
    """
    row = _row(row)
    b = _unified_b(thr)
    g = cfg.gamma
    pos_arg = -g * (row.pos - cfg.margin) + b
    neg_args = g * row.negs - b
    value, s_pos, s_neg = _threshold_loss(pos_arg, neg_args)
    return LossOutput(value, d_pos=-g * s_pos, d_negs=g * s_neg,
                      d_b=s_pos - float(np.sum(s_neg)))


@dataclass(frozen=True)
class StationaryThreshold:
    b: float
    t: float
    in_range: bool


def stationary_b(n_ids: int, gamma: float) -> StationaryThreshold:
    """Threshold where the USS gradient in ``b`` vanishes at perfect similarities.

    With ``g_pos = 1`` and all ``N - 1`` negatives at ``-1`` the stationarity
    condition is a quadratic in ``e^b`` whose positive root is returned.
    ``in_range`` reports ``N < (e^{2 gamma} + 3) / 2``, equivalently ``t`` in (-1, 1).
    """
    if n_ids < 2 or not (gamma > 0 and math.isfinite(gamma)):
        raise InvalidConfig("need n_ids >= 2 and gamma > 0")
    c = math.exp(-gamma)
    k = n_ids - 2
    root = (k * c + math.sqrt((k * c) ** 2 + 4.0 * (n_ids - 1))) / 2.0
    b = math.log(root)
    # compare in log space: 2N - 3 < e^{2 gamma}
    in_range = math.log(2 * n_ids - 3) < 2.0 * gamma
    return StationaryThreshold(b=b, t=b / gamma, in_range=in_range)


def s2s_softmax_loss(row, cfg: LossConfig) -> LossOutput:
    """Cross-entropy of the positive among the ``N`` scaled similarities of a row."""
    row = _row(row)
    g = cfg.gamma
    logits = np.concatenate(([g * (row.pos - cfg.margin)], g * row.negs))
    value = logsumexp(logits) - logits[0]
    p = softmax(logits)
    return LossOutput(value, d_pos=g * (p[0] - 1.0), d_negs=g * p[1:])


def s2s_bce_loss(row, anchor_id: int, neg_ids: Sequence[int], thr: ThresholdParams,
                 cfg: LossConfig) -> LossOutput:
    """Per-identity threshold loss: the anchor's ``b_i`` on the positive term,
    each negative's own ``b_j`` on its term."""
    row = _row(row)
    if thr.mode != "per_identity":
        raise InvalidConfig("BCE loss needs per-identity thresholds")
    ids = np.asarray(neg_ids, dtype=np.int64)
    n = thr.b_vec.size
    if ids.shape != row.negs.shape:
        raise IdMismatch(f"{ids.size} negative ids for {row.negs.size} negatives")
    if not (0 <= anchor_id < n) or (ids.size and (ids.min() < 0 or ids.max() >= n)):
        raise IdMismatch("identity index outside the threshold vector")
    if np.any(ids == anchor_id):
        raise IdMismatch("anchor identity listed among its negatives")
    g = cfg.gamma
    pos_arg = -g * (row.pos - cfg.margin) + thr.b_vec[anchor_id]
    neg_args = g * row.negs - thr.b_vec[ids]
    value, s_pos, s_neg = _threshold_loss(pos_arg, neg_args)
    d_b_vec = np.zeros(n)
    d_b_vec[anchor_id] += s_pos
    np.subtract.at(d_b_vec, ids, s_neg)
    return LossOutput(value, d_pos=-g * s_pos, d_negs=g * s_neg, d_b_vec=d_b_vec)


# ---------------------------------------------------------------------------
# inequality chain


ROW_CHECKS = ("mean_negative", "pairwise", "pair_sum", "threshold_split", "uss_identity", "softmax_logsumexp", "softmax_loss")
MATRIX_CHECKS = ("batch_pairwise", "batch_pair_sum", "batch_threshold_split", "batch_bce")
THRESHOLD_CHECKS = frozenset({"threshold_split", "uss_identity", "batch_threshold_split", "batch_bce"})


@dataclass
class InequalityReport:
    """Minimum slack (RHS - LHS) observed per bound; ``nan`` when never evaluated.

    Equalities report ``-|RHS - LHS|``.
    """

    slacks: dict
    evaluated: dict
    skipped: dict

    def ok(self, tol: float = 1e-9) -> bool:
        return all(not (s < -tol) for s in self.slacks.values())

    def violations(self, tol: float = 1e-9) -> list:
        return [k for k, s in self.slacks.items() if s < -tol]

    def merge(self, other: "InequalityReport") -> "InequalityReport":
        out = InequalityReport(dict(self.slacks), dict(self.evaluated), dict(self.skipped))
        for k, s in other.slacks.items():
            cur = out.slacks.get(k, math.nan)
            out.slacks[k] = s if math.isnan(cur) else (cur if math.isnan(s) else min(cur, s))
            out.evaluated[k] = out.evaluated.get(k, 0) + other.evaluated.get(k, 0)
            out.skipped[k] = out.skipped.get(k, 0) + other.skipped.get(k, 0)
        return out


def _sp(x):
    # numpy's logaddexp is independent of our softplus; the bounds use it on
    # their right-hand sides so the check does not share code with the losses
    return np.logaddexp(0.0, x)


def _row_naive(pos: float, negs: np.ndarray, gamma: float) -> float:
    return -gamma * pos + gamma * float(np.mean(negs))


def check_row_inequalities(row, gamma: float, t: Optional[float] = None,
                           rhs_shift: float = 0.0) -> dict:
    """Slacks of the single-row bounds on the naive loss.

    Threshold-dependent bounds are returned as ``None`` when ``t`` is absent or
    does not satisfy ``max(negs) < t <= pos``.
    """
    row = _row(row)
    p, n, g = row.pos, row.negs, gamma
    N = row.n_ids
    L = _row_naive(p, n, g)
    out = {}
    mean_term = _sp(g * float(np.mean(n)) - g * p)
    pair_terms = _sp(g * n - g * p)
    out["mean_negative"] = 2.0 * mean_term - 2.0 * LOG2 + rhs_shift - L
    out["pairwise"] = (2.0 / (N - 1)) * float(np.sum(pair_terms)) - 2.0 * LOG2 + rhs_shift - L
    rhs8 = mean_term + float(np.sum(pair_terms))
    out["pair_sum"] = rhs8 + rhs_shift - (N / 2.0 * L + N * LOG2)
    feasible = t is not None and float(np.max(n)) < t <= p
    if feasible:
        rhs9 = (_sp(g * float(np.sum(np.full(N - 1, t / (N - 1)))) - g * p)
                + float(np.sum(_sp(g * n - g * t))))
        out["threshold_split"] = rhs9 + rhs_shift - rhs8
        rhs10 = uss_loss(row, g * t, LossConfig(gamma=g)).value
        out["uss_identity"] = -abs(rhs10 + rhs_shift - rhs9)
    else:
        out["threshold_split"] = out["uss_identity"] = None
    logits = g * np.concatenate(([p], n))
    rhs12 = (-(N / (N - 1)) * (g * p - np.logaddexp.reduce(logits))
             - N * math.log(N) / (N - 1))
    out["softmax_logsumexp"] = float(rhs12) + rhs_shift - L
    soft = s2s_softmax_loss(row, LossConfig(gamma=g)).value
    out["softmax_loss"] = N / (N - 1) * soft - N / (N - 1) * math.log(N) + rhs_shift - L
    return out


def check_matrix_inequalities(S, gamma: float, t_vec=None, rhs_shift: float = 0.0) -> dict:
    """Slacks of the batch-summed bounds on a square similarity matrix.

    ``S[i, j]`` is the similarity of anchor ``i`` to gallery sample ``j``; the
    diagonal holds the positives.
    """
    S = np.asarray(S, dtype=np.float64)
    N = S.shape[0]
    g = gamma
    diag = np.diag(S)
    off = ~np.eye(N, dtype=bool)
    L = np.array([_row_naive(S[i, i], S[i][off[i]], g) for i in range(N)])
    sumL = float(np.sum(L))
    cross = _sp(g * S - g * diag[None, :])  # [i, j] -> log(1 + e^{g S_ij - g S_jj})
    cross_sum = float(np.sum(cross[off]))
    out = {}
    out["batch_pairwise"] = (2.0 / (N - 1)) * cross_sum - 2.0 * N * LOG2 + rhs_shift - sumL
    means = np.array([np.mean(S[i][off[i]]) for i in range(N)])
    rhs18a = float(np.sum(_sp(g * means - g * diag))) + cross_sum
    out["batch_pair_sum"] = rhs18a + rhs_shift - (N / 2.0 * sumL + N * N * LOG2)
    feasible = False
    if t_vec is not None:
        t_vec = np.asarray(t_vec, dtype=np.float64)
        row_max = np.array([np.max(S[i][off[i]]) for i in range(N)])
        feasible = bool(np.all(row_max < t_vec) and np.all(t_vec <= diag))
    if feasible:
        pos_terms = _sp(-g * diag + g * t_vec)
        neg_terms = _sp(g * S - g * t_vec[None, :])
        rhs18b = float(np.sum(pos_terms)) + float(np.sum(neg_terms[off]))
        out["batch_threshold_split"] = rhs18b + rhs_shift - rhs18a
        thr = ThresholdParams.per_identity(g * t_vec, g)
        cfg = LossConfig(gamma=g)
        ids = np.arange(N)
        bce = sum(s2s_bce_loss(SimilarityRow(S[i, i], S[i][off[i]]), i, ids[off[i]], thr, cfg).value
                  for i in range(N))
        out["batch_bce"] = (2.0 / N) * bce - 2.0 * N * LOG2 + rhs_shift - sumL
    else:
        out["batch_threshold_split"] = out["batch_bce"] = None
    return out


def check_inequalities(S, gamma: float, t: Optional[float] = None, t_vec=None,
                       rhs_shift: float = 0.0) -> InequalityReport:
    """Evaluate every bound on a square anchor-by-gallery similarity matrix.

    Row bounds run on each anchor row; the unified chain uses ``t`` (or the
    row's own ``t_vec`` entry when only per-identity thresholds are given).
    Infeasible thresholds are counted under ``skipped`` rather than raised.
    """
    S = np.clip(np.asarray(S, dtype=np.float64), -1.0, 1.0)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 2:
        raise InvalidConfig("need a square similarity matrix with at least two anchors")
    N = S.shape[0]
    names = ROW_CHECKS + MATRIX_CHECKS
    slacks = {k: math.nan for k in names}
    evaluated = {k: 0 for k in names}
    skipped = {k: 0 for k in names}

    def record(res):
        for k, v in res.items():
            if v is None:
                skipped[k] += 1
            else:
                evaluated[k] += 1
                slacks[k] = v if math.isnan(slacks[k]) else min(slacks[k], v)

    off = ~np.eye(N, dtype=bool)
    for i in range(N):
        ti = t if t is not None else (None if t_vec is None else float(t_vec[i]))
        record(check_row_inequalities(SimilarityRow(S[i, i], S[i][off[i]]), gamma, ti, rhs_shift))
    if t_vec is None and t is not None:
        t_vec = np.full(N, t)
    record(check_matrix_inequalities(S, gamma, t_vec, rhs_shift))
    return InequalityReport(slacks, evaluated, skipped)
