"""Self-verification suites behind the ``gradcheck`` and ``theory-check`` commands.

Relative error throughout is ``|a - n| / max(|a|, |n|, 1)``: relative for
large partials, absolute below one so that derivatives that are exactly or
nearly zero do not blow the ratio up.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidConfig, ZeroNorm
from .model import EmbeddingNet
from .numerics import l2_normalize, normalize_rows
from .s2c import S2CConfig, combined_loss, s2c_loss
from .s2s import (MATRIX_CHECKS, ROW_CHECKS, InequalityReport, LossConfig, SimilarityRow,
                  ThresholdParams, check_inequalities, naive_loss, s2s_bce_loss,
                  s2s_softmax_loss, stationary_b, uss_loss)

LOSS_NAMES = ("naive", "uss", "uss-m", "soft", "soft-m", "bce", "bce-m",
              "cos-margin", "arc-margin", "combined")
NETWORK_PRESETS = ("naive", "uss", "uss-m", "soft", "soft-m", "bce", "bce-m",
                   "cos-margin", "arc-margin", "unitsface")
GAMMAS = (1.0, 4.0, 16.0, 64.0)
# keep finite-difference probes away from the clipping at +-1
_SIM_LIMIT = 0.999


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)


@dataclass
class GradcheckResult:
    name: str
    trials: int
    max_rel_err: float
    worst: dict = field(default_factory=dict)
    seconds: float = 0.0

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _central(f: Callable[[np.ndarray], float], z: np.ndarray, h: float) -> np.ndarray:
    g = np.empty_like(z)
    for i in range(z.size):
        up, dn = z.copy(), z.copy()
        up.flat[i] += h
        dn.flat[i] -= h
        g.flat[i] = (f(up) - f(dn)) / (2.0 * h)
    return g


def _random_row(rng, n_negs):
    return (float(rng.uniform(-_SIM_LIMIT, _SIM_LIMIT)),
            rng.uniform(-_SIM_LIMIT, _SIM_LIMIT, n_negs))


def _angular_safe(cfg: S2CConfig, x, W, y) -> bool:
    # the angular target has a kink at theta + m = pi and a sine floor near cos = +-1
    c = float(x @ W[y])
    if cfg.kind != "angular":
        return True
    return abs(c - math.cos(math.pi - cfg.margin)) > 1e-3 and abs(c) < 1 - 1e-4


def _random_s2c(rng, kind):
    n = int(rng.integers(2, 9))
    d = int(rng.integers(2, 7))
    cfg = S2CConfig(scale=float(rng.choice(GAMMAS)),
                    margin=float(rng.uniform(0.0, 0.5 if kind == "angular" else 0.4)), kind=kind)
    while True:
        x = l2_normalize(rng.standard_normal(d))
        W = normalize_rows(rng.standard_normal((n, d)))
        y = int(rng.integers(n))
        if _angular_safe(cfg, x, W, y):
            return x, W, y, cfg


def _trial(name: str, rng, h: float):
    """One random configuration: ``(analytic, numeric)`` gradient vectors."""
    base = name.removesuffix("-m")
    margin = float(rng.uniform(0.05, 0.5)) if name.endswith("-m") else 0.0
    gamma = float(rng.choice(GAMMAS))
    cfg = LossConfig(gamma=gamma, margin=margin)
    if base in ("naive", "uss", "soft", "bce"):
        n_negs = int(rng.integers(1, 16))
        pos, negs = _random_row(rng, n_negs)
        if base == "bce":
            n_ids = n_negs + 1 + int(rng.integers(0, 3))
            anchor = int(rng.integers(n_ids))
            others = np.delete(np.arange(n_ids), anchor)
            neg_ids = rng.choice(others, size=n_negs, replace=True)
            b0 = rng.normal(0.0, gamma / 2, n_ids)

            def f(z):
                return s2s_bce_loss((z[0], z[1:1 + n_negs]), anchor, neg_ids,
                                    ThresholdParams.per_identity(z[1 + n_negs:], gamma), cfg).value

            z = np.concatenate(([pos], negs, b0))
            out = s2s_bce_loss((pos, negs), anchor, neg_ids, ThresholdParams.per_identity(b0, gamma), cfg)
            analytic = np.concatenate(([out.d_pos], out.d_negs, out.d_b_vec))
        else:
            b0 = float(rng.normal(0.0, gamma / 2))
            fn = {"naive": lambda r, b: naive_loss(r, cfg),
                  "uss": lambda r, b: uss_loss(r, b, cfg),
                  "soft": lambda r, b: s2s_softmax_loss(r, cfg)}[base]

            def f(z):
                return fn((z[0], z[1:-1]), z[-1]).value

            z = np.concatenate(([pos], negs, [b0]))
            out = fn((pos, negs), b0)
            analytic = np.concatenate(([out.d_pos], out.d_negs, [out.d_b]))
        return analytic, _central(f, z, h)
    if name in ("cos-margin", "arc-margin"):
        x, W, y, scfg = _random_s2c(rng, "cosine" if name == "cos-margin" else "angular")
        d = x.size

        def f(z):
            return s2c_loss(z[:d], z[d:].reshape(W.shape), y, scfg).value

        out = s2c_loss(x, W, y, scfg)
        z = np.concatenate((x, W.ravel()))
        return np.concatenate((out.d_x, out.d_W.ravel())), _central(f, z, h)
    if name == "combined":
        x, W, y, scfg = _random_s2c(rng, "cosine")
        n_negs = int(rng.integers(1, 16))
        pos, negs = _random_row(rng, n_negs)
        ucfg = LossConfig(gamma=gamma, margin=float(rng.uniform(0.0, 0.5)))
        b0 = float(rng.normal(0.0, gamma / 2))
        d = x.size
        k = d + W.size

        def parts(z):
            return (s2c_loss(z[:d], z[d:k].reshape(W.shape), y, scfg),
                    uss_loss((z[k], z[k + 1:-1]), z[-1], ucfg))

        def f(z):
            return combined_loss(*parts(z)).value

        z = np.concatenate((x, W.ravel(), [pos], negs, [b0]))
        out = combined_loss(*parts(z))
        analytic = np.concatenate((out.d_x, out.d_W.ravel(), [out.d_pos], out.d_negs, [out.d_b]))
        return analytic, _central(f, z, h)
    raise InvalidConfig(f"unknown loss {name!r}")


def gradcheck_loss(name: str, trials: int = 200, seed: int = 0, h: float = 1e-6,
                   broken: bool = False) -> GradcheckResult:
    """Analytic partials of one loss against central differences on random inputs.

    ``broken`` flips the sign of the analytic gradient; the check must then fail.
    """
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = {"rel_err": 0.0}
    for trial in range(trials):
        analytic, numeric = _trial(name, rng, h)
        if broken:
            analytic = -analytic
        errs = [rel_err(a, n) for a, n in zip(analytic, numeric)]
        i = int(np.argmax(errs))
        if errs[i] > worst["rel_err"]:
            worst = {"rel_err": errs[i], "trial": trial, "index": i,
                     "analytic": float(analytic[i]), "numeric": float(numeric[i])}
    return GradcheckResult(name, trials, worst["rel_err"], worst, time.perf_counter() - start)


def gradcheck_network(preset: str, seeds: int = 20, sizes=(8, 6, 4), h: float = 1e-6,
                      broken: bool = False) -> GradcheckResult:
    """Loss through similarities through a tiny network, every parameter checked."""
    from .training import batch_objective

    start = time.perf_counter()
    worst = {"rel_err": 0.0}
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        net = EmbeddingNet(list(sizes), seed=seed)
        P = int(rng.integers(2, 5))
        n_ids = P + 2
        ids = np.sort(rng.choice(n_ids, size=P, replace=False))
        # differences across a ReLU kink are meaningless; redraw such inputs
        while True:
            X = rng.standard_normal((2 * P, sizes[0]))
            try:
                net.forward(X)
            except ZeroNorm:
                continue
            if net.kink_distance() > 1e-4:
                break
        W = normalize_rows(rng.standard_normal((n_ids, sizes[-1])))
        b = float(rng.normal())
        b_vec = rng.normal(size=n_ids)
        m = 0.1 if preset.endswith("-m") or preset == "unitsface" else 0.0
        lcfg = LossConfig(gamma=4.0, margin=m)
        scfg = S2CConfig(scale=4.0, margin=0.3, kind="angular" if preset == "arc-margin" else "cosine")

        def objective():
            E = net.forward(X)
            return batch_objective(preset, E[:P], E[P:], ids, lcfg, scfg, W, b, b_vec)

        out = objective()
        grads = net.backward(np.vstack((out.d_anchors, out.d_galleries)))
        for key, p in net.params.items():
            for i in range(p.size):
                old = p.flat[i]
                p.flat[i] = old + h
                fp = objective().value
                p.flat[i] = old - h
                fm = objective().value
                p.flat[i] = old
                num = (fp - fm) / (2.0 * h)
                ana = -grads[key].flat[i] if broken else grads[key].flat[i]
                e = rel_err(ana, num)
                if e > worst["rel_err"]:
                    worst = {"rel_err": e, "seed": seed, "param": f"{key}[{i}]",
                             "analytic": float(ana), "numeric": float(num)}
    return GradcheckResult(f"network/{preset}", seeds, worst["rel_err"], worst,
                           time.perf_counter() - start)


def feasible_matrix(rng, n: int):
    """Random ``n x n`` similarities with a unified ``t`` and per-identity ``t_i``
    that both separate every row (negatives strictly below, positive at or above)."""
    t = float(rng.uniform(-0.6, 0.6))
    t_vec = np.clip(t + rng.uniform(-0.2, 0.2, n), -0.9, 0.9)
    lo = np.minimum(t, t_vec)
    hi = np.maximum(t, t_vec)
    S = np.empty((n, n))
    for i in range(n):
        S[i] = rng.uniform(-1.0, lo[i], n)
        S[i, i] = rng.uniform(hi[i], 1.0)
    return S, t, t_vec


@dataclass
class TheoryResult:
    report: InequalityReport
    trials: int
    seconds: float
    worst: dict = field(default_factory=dict)

    def ok(self, tol: float = 1e-9) -> bool:
        return self.report.ok(tol) and all(
            self.report.evaluated[k] > 0 for k in ROW_CHECKS + MATRIX_CHECKS)


def theory_check(trials: int = 1000, seed: int = 0, rhs_shift: float = 0.0,
                 max_n: int = 64) -> TheoryResult:
    """Every implemented bound on ``trials`` random feasible configurations.

    Each trial draws ``N`` in ``[2, max_n]`` and ``gamma`` from {1, 4, 16, 64}.
    ``rhs_shift`` is added to every right-hand side; a negative shift must be
    reported as a violation. ``worst`` keeps, per bound, the configuration with
    the smallest slack so a failure can be reproduced.
    """
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    report = None
    worst = {}
    for trial in range(trials):
        n = int(rng.integers(2, max_n + 1))
        gamma = float(rng.choice(GAMMAS))
        S, t, t_vec = feasible_matrix(rng, n)
        rep = check_inequalities(S, gamma, t=t, t_vec=t_vec, rhs_shift=rhs_shift)
        for k, v in rep.slacks.items():
            if not math.isnan(v) and (k not in worst or v < worst[k]["slack"]):
                worst[k] = {"slack": float(v), "trial": trial, "n_ids": n, "gamma": gamma,
                            "t": t, "t_vec": t_vec.tolist(), "similarities": S.tolist()}
        report = rep if report is None else report.merge(rep)
    return TheoryResult(report, trials, time.perf_counter() - start, worst)


@dataclass
class StationaryRow:
    n_ids: int
    gamma: float
    b: float
    d_b: float
    in_range: bool
    expected_in_range: bool


def stationary_sweep(ns=(2, 10, 1000, 10**6), gammas=GAMMAS) -> list[StationaryRow]:
    """Closed-form ``b`` plugged back into the USS gradient at perfect similarities."""
    rows = []
    for n in ns:
        for g in gammas:
            st = stationary_b(n, g)
            out = uss_loss(SimilarityRow(1.0, np.full(n - 1, -1.0)), st.b, LossConfig(gamma=g))
            # N < (e^{2g} + 3) / 2, written without overflowing exp
            expected = 2 * n - 3 < math.exp(min(2 * g, 700.0))
            rows.append(StationaryRow(n, g, st.b, out.d_b, st.in_range, expected))
    return rows


def descend_threshold(n_ids: int = 8, gamma: float = 4.0, lr: float = 0.5,
                      b0: float = 0.0, tol: float = 1e-14, max_iter: int = 100_000) -> tuple[float, int]:
    """Plain gradient descent on ``b`` with fixed similarities ``g_pos = 1``, ``g_neg = -1``."""
    row = SimilarityRow(1.0, np.full(n_ids - 1, -1.0))
    cfg = LossConfig(gamma=gamma)
    b = b0
    for it in range(1, max_iter + 1):
        step = lr * uss_loss(row, b, cfg).d_b
        b -= step
        if abs(step) < tol:
            return b, it
    return b, max_iter


def run_gradchecks(trials: int = 200, network_seeds: int = 20, seed: int = 0,
                   broken: bool = False, names: Optional[tuple] = None,
                   presets: Optional[tuple] = None) -> list[GradcheckResult]:
    results = [gradcheck_loss(n, trials, seed, broken=broken) for n in (names or LOSS_NAMES)]
    if network_seeds:
        results += [gradcheck_network(p, network_seeds, broken=broken)
                    for p in (presets or NETWORK_PRESETS)]
    return results
