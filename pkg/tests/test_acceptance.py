"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The lines are also collected and repeated in the terminal summary (see conftest).
Training-based criteria share one cache of runs so every configuration is
trained once per session.
"""

import math
import time

import numpy as np
import pytest

import oracles
from usslearn.checks import (descend_threshold, run_gradchecks, stationary_sweep,
                             theory_check)
from usslearn.config import ExperimentConfig
from usslearn.evaluation import (ScoreSet, eer, evaluate_embeddings, kfold_accuracy,
                                 per_identity_thresholds, tar_at_far)
from usslearn.numerics import normalize_rows
from usslearn.s2c import S2CConfig, s2c_loss
from usslearn.s2s import (LossConfig, SimilarityRow, ThresholdParams, s2s_bce_loss,
                          s2s_softmax_loss, stationary_b, uss_loss)
from usslearn.training import batch_objective, experiment_data, train
from test_evaluation import random_score_set

RESULTS = []
SEEDS = range(5)
FARS = (0.0, 1e-3, 1e-2, 0.1, 0.5, 1.0)


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    print(line)
    return ok


_RUNS = {}


def run(preset, seed, sigma=0.25):
    """Train with the package defaults; return (state, held-out report, seconds)."""
    key = (preset, seed, sigma)
    if key not in _RUNS:
        cfg = ExperimentConfig(preset=preset, seed=seed, sigma=sigma)
        train_ds, holdout = experiment_data(cfg)
        start = time.perf_counter()
        state = train(cfg, train_ds, holdout)
        seconds = time.perf_counter() - start
        rep = evaluate_embeddings(state.embed(holdout.features), holdout.labels,
                                  state.learned_t, seed=seed)
        _RUNS[key] = (state, rep, seconds)
    return _RUNS[key]


def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    results = run_gradchecks(trials=200, network_seeds=20, seed=0)
    seconds = time.perf_counter() - start
    scalar = [r for r in results if not r.name.startswith("network/")]
    network = [r for r in results if r.name.startswith("network/")]
    worst_s = max(r.max_rel_err for r in scalar)
    worst_n = max(r.max_rel_err for r in network)
    ok = (len(scalar) == 10 and len(network) == 10 and worst_s < 1e-5 and worst_n < 1e-4
          and seconds < 60)
    assert report(1, ok, f"10 losses x 200 trials max rel err {worst_s:.2e} (< 1e-5), "
                         f"network max {worst_n:.2e} (< 1e-4), {seconds:.1f}s (< 60s)")


def test_criterion_2_inequality_suite():
    res = theory_check(trials=1000, seed=0)
    slacks = res.report.slacks
    worst = min(slacks.values())
    ok = res.ok(1e-9) and res.seconds < 30 and not any(math.isnan(s) for s in slacks.values())
    assert report(2, ok, f"{len(slacks)} bounds x 1000 trials, min slack {worst:.2e} "
                         f"(>= -1e-9), {res.seconds:.1f}s (< 30s)")


def test_criterion_3_stationary_threshold():
    start = time.perf_counter()
    b, iters = descend_threshold(n_ids=8, gamma=4.0)
    closed = stationary_b(8, 4.0).b
    rows = stationary_sweep(ns=(2, 10, 10**3, 10**6), gammas=(1.0, 4.0, 16.0, 64.0))
    worst_db = max(abs(r.d_b) for r in rows)
    # the range condition evaluated directly, independent of the library's log form
    flags_ok = all(r.in_range == (r.n_ids < (math.exp(2 * r.gamma) + 3) / 2) for r in rows)
    seconds = time.perf_counter() - start
    ok = abs(b - closed) < 1e-6 and len(rows) == 16 and worst_db < 1e-12 and flags_ok \
        and seconds < 10
    assert report(3, ok, f"descent {b:.10f} vs closed form {closed:.10f} after {iters} steps, "
                         f"max |d_b| {worst_db:.1e} over 16 (N, gamma), range flags "
                         f"{'match' if flags_ok else 'DIFFER'}, {seconds:.2f}s")


class TestCriterion4:
    """Default net, uss-m (gamma 64, m 0.1), seed 0, sigma 0.25, 28 epochs."""

    def test_a_learned_threshold_in_range(self):
        state, _, seconds = run("uss-m", 0)
        t = state.learned_t
        assert report("4a", -1 < t < 1 and seconds < 300,
                      f"learned t = {t:.4f} in (-1, 1), trained in {seconds:.1f}s (< 300s)")

    def test_b_accuracy_at_learned_threshold(self):
        state, rep, _ = run("uss-m", 0)
        acc = rep.accuracy_at_learned_t
        assert report("4b", acc >= 0.99,
                      f"held-out accuracy at t = {acc:.4f} (>= 0.99); all-reject baseline "
                      f"{rep.n_negative_pairs / (rep.n_negative_pairs + rep.n_positive_pairs):.4f}")

    def test_c_unified_threshold_on_holdout(self):
        _, rep, _ = run("uss-m", 0)
        violation = max(0.0, -rep.feasibility_margin)
        ok = rep.unified_ok or violation < 0.02
        assert report("4c", ok, f"unified_ok={rep.unified_ok}, feasibility margin "
                                f"{rep.feasibility_margin:.4f} (violation < 0.02)")


def test_criterion_5_threshold_compactness():
    wins, inside, rows = 0, 0, []
    for seed in SEEDS:
        uss_state, uss, _ = run("uss", seed)
        _, soft, _ = run("soft", seed)
        a, b = uss.per_identity["iqr"], soft.per_identity["iqr"]
        t = uss_state.learned_t
        wins += a <= b
        inside += uss.per_identity["min"] <= t <= uss.per_identity["max"]
        rows.append(f"{a:.3f}/{b:.3f}")
    ok = wins >= 4 and inside == 5
    assert report(5, ok, f"IQR uss <= soft in {wins}/5 seeds (>= 4) [{', '.join(rows)}], "
                         f"t inside [min, max] in {inside}/5")


def test_criterion_6_margin_effect():
    wins, rows = 0, []
    for seed in SEEDS:
        with_m = run("uss-m", seed)[1].tar(1e-2)
        without = run("uss", seed)[1].tar(1e-2)
        wins += with_m >= without
        rows.append(f"{with_m:.3f}/{without:.3f}")
    assert report(6, wins >= 4, f"TAR@1e-2 uss-m >= uss in {wins}/5 seeds [{', '.join(rows)}]")


def test_criterion_7_combination_effect():
    wins, rows = 0, []
    for seed in SEEDS:
        both = run("unitsface", seed, 0.35)[1].tar(1e-2)
        cos = run("cos-margin", seed, 0.35)[1].tar(1e-2)
        uss = run("uss-m", seed, 0.35)[1].tar(1e-2)
        wins += both >= max(cos, uss)
        rows.append(f"{both:.3f}/{cos:.3f}/{uss:.3f}")
    assert report(7, wins >= 4, f"sigma 0.35 TAR@1e-2 unitsface >= cos-margin and uss-m in "
                                f"{wins}/5 seeds [{', '.join(rows)}]")


def test_criterion_8_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        s = random_score_set(rng)
        for (_, tau, tar), (_, tau_o, tar_o) in zip(
                tar_at_far(s, FARS), oracles.tar_at_far(list(s.positives), list(s.negatives), FARS)):
            worst = max(worst, abs(tau - tau_o), abs(tar - tar_o))
        worst = max(worst, abs(eer(s) - oracles.eer(list(s.positives), list(s.negatives))))
        scores, labels = s.labeled()
        if scores.size >= 4:
            k = int(rng.integers(2, min(10, scores.size) + 1))
            mean, folds = kfold_accuracy(scores, labels, k, seed=11)
            mean_o, folds_o = oracles.kfold(list(scores), list(labels), k, 11)
            worst = max(worst, abs(mean - mean_o), *np.abs(np.subtract(folds, folds_o)))
        n_ids = int(rng.integers(2, 9))
        per = int(rng.integers(2, 4))
        E = normalize_rows(rng.standard_normal((n_ids * per, 4)))
        labels = np.repeat(np.arange(n_ids), per)
        got = per_identity_thresholds(E, labels, seed=5).thresholds
        worst = max(worst, float(np.max(np.abs(got - oracles.per_identity(E, labels, 5)))))
    seconds = time.perf_counter() - start
    ok = worst <= 1e-12 and seconds < 10
    assert report(8, ok, f"4 metrics x 100 random sets, max deviation {worst:.1e} (<= 1e-12), "
                         f"{seconds:.2f}s (< 10s)")


def test_criterion_9_reduction_identities():
    rng = np.random.default_rng(9)
    bce_dev = plain_dev = 0.0
    margin_exact = True
    for _ in range(200):
        n = int(rng.integers(2, 10))
        gamma = float(rng.choice([1.0, 4.0, 16.0, 64.0]))
        margin = float(rng.choice([0.0, 0.1, 0.35]))
        cfg = LossConfig(gamma=gamma, margin=margin)
        row = SimilarityRow(float(rng.uniform(-1, 1)), rng.uniform(-1, 1, n - 1))
        b = float(rng.normal(0, gamma / 4))
        tied = ThresholdParams.per_identity(np.full(n, b), gamma)
        bce = s2s_bce_loss(row, 0, np.arange(1, n), tied, cfg).value
        bce_dev = max(bce_dev, abs(bce - uss_loss(row, b, cfg).value))

        G = normalize_rows(rng.standard_normal((n, 6)))
        x = normalize_rows(rng.standard_normal((1, 6)))[0]
        y = int(rng.integers(n))
        plain = s2c_loss(x, G, y, S2CConfig(scale=gamma, margin=0.0, kind="plain")).value
        sims = G @ x
        soft = s2s_softmax_loss(SimilarityRow(sims[y], np.delete(sims, y)), LossConfig(gamma)).value
        plain_dev = max(plain_dev, abs(plain - soft))
        for kind in ("cosine", "angular"):
            zero = s2c_loss(x, G, y, S2CConfig(scale=gamma, margin=0.0, kind=kind))
            ref = s2c_loss(x, G, y, S2CConfig(scale=gamma, margin=0.0, kind="plain"))
            margin_exact &= zero.value == ref.value and np.array_equal(zero.d_x, ref.d_x)

        A = normalize_rows(rng.standard_normal((n, 5)))
        Gb = normalize_rows(rng.standard_normal((n, 5)))
        ids = rng.permutation(n + 2)[:n]
        zero_cfg = LossConfig(gamma=gamma, margin=0.0)
        bvec = rng.normal(0, 1, n + 2)
        for marginal, vanilla in (("uss-m", "uss"), ("soft-m", "soft"), ("bce-m", "bce")):
            m_out = batch_objective(marginal, A, Gb, ids, zero_cfg, b=b, b_vec=bvec)
            v_out = batch_objective(vanilla, A, Gb, ids, zero_cfg, b=b, b_vec=bvec)
            margin_exact &= (m_out.value == v_out.value
                             and np.array_equal(m_out.d_anchors, v_out.d_anchors))
    ok = bce_dev <= 1e-15 and plain_dev <= 1e-12 and margin_exact
    assert report(9, ok, f"bce(tied b) vs uss {bce_dev:.1e} (<= 1e-15), plain s2c vs s2s "
                         f"softmax {plain_dev:.1e} (<= 1e-12), m=0 variants "
                         f"{'exact' if margin_exact else 'DIFFER'}")
