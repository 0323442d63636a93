import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from usslearn.checks import gradcheck_loss
from usslearn.errors import InvalidConfig, ShapeMismatch
from usslearn.numerics import normalize_rows
from usslearn.s2c import (S2CConfig, combined_loss, init_proxies, s2c_batch_loss, s2c_logits,
                          s2c_loss)
from usslearn.s2s import LossConfig, LossOutput, s2s_softmax_loss, uss_loss

# mpmath: 64*cos(0.5)
ARC_TARGET_AT_ONE = 56.1652839609838538


def _unit_setup(n=3, d=3):
    W = np.eye(n, d)
    return np.array([1.0] + [0.0] * (d - 1)), W


class TestLogits:
    def test_cosine_margin_target(self):
        x, W = _unit_setup()
        logits = s2c_logits(x, W, 0, S2CConfig(scale=64, margin=0.35, kind="cosine"))
        assert logits[0] == pytest.approx(41.6, abs=1e-12)
        np.testing.assert_array_equal(logits[1:], [0.0, 0.0])

    def test_angular_margin_target(self):
        x, W = _unit_setup()
        logits = s2c_logits(x, W, 0, S2CConfig(scale=64, margin=0.5, kind="angular"))
        assert logits[0] == pytest.approx(ARC_TARGET_AT_ONE, abs=1e-12)

    def test_zero_margin_kinds_coincide(self):
        rng = np.random.default_rng(0)
        W = normalize_rows(rng.standard_normal((5, 4)))
        x = normalize_rows(rng.standard_normal((1, 4)))[0]
        ref = s2c_logits(x, W, 2, S2CConfig(scale=10, margin=0.0, kind="plain"))
        for kind in ("cosine", "angular"):
            np.testing.assert_allclose(s2c_logits(x, W, 2, S2CConfig(10, 0.0, kind)), ref,
                                       rtol=0, atol=1e-12)

    def test_angular_fallback_past_pi(self):
        cfg = S2CConfig(scale=1.0, margin=0.5, kind="angular")
        W = np.array([[1.0, 0.0], [0.0, 1.0]])
        x = np.array([-1.0, 0.0])  # theta_y = pi
        logit = s2c_logits(x, W, 0, cfg)[0]
        assert logit == pytest.approx(-1.0 - 0.5 * math.sin(0.5), abs=1e-15)

    @given(st.floats(-0.999, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 0.3),
           st.sampled_from(["cosine", "angular"]))
    def test_target_non_increasing_in_margin(self, c, m, dm, kind):
        W = np.array([[1.0, 0.0], [0.0, 1.0]])
        x = np.array([c, math.sqrt(max(0.0, 1 - c * c))])
        top = 1.5 if kind == "angular" else 2.0
        lo = s2c_logits(x, W, 0, S2CConfig(1.0, min(m, top), kind))[0]
        hi = s2c_logits(x, W, 0, S2CConfig(1.0, min(m + dm, top), kind))[0]
        assert hi <= lo + 1e-12

    def test_invalid_config(self):
        with pytest.raises(InvalidConfig):
            S2CConfig(kind="sphere")
        with pytest.raises(InvalidConfig):
            S2CConfig(margin=2.0, kind="angular")
        with pytest.raises(InvalidConfig):
            S2CConfig(scale=0.0)

    def test_shape_errors(self):
        with pytest.raises(ShapeMismatch):
            s2c_logits(np.ones(3) / math.sqrt(3), np.eye(2), 0, S2CConfig())
        with pytest.raises(ShapeMismatch):
            s2c_logits(np.array([1.0, 0.0]), np.eye(2), 5, S2CConfig())


class TestLoss:
    def test_uniform(self):
        W = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        x = np.array([0.0, 0.0])
        # x orthogonal to nothing in particular: all cosines zero
        out = s2c_loss(x, W, 1, S2CConfig(scale=64, margin=0.0, kind="plain"))
        assert out.value == pytest.approx(math.log(4), abs=1e-15)

    def test_two_class_scalar(self):
        W = np.array([[1.0, 0.0], [-1.0, 0.0]])
        out = s2c_loss(np.array([1.0, 0.0]), W, 0, S2CConfig(scale=1.0, margin=0.0, kind="plain"))
        assert out.value == pytest.approx(0.126928011042972496, abs=2e-16)

    @pytest.mark.parametrize("name", ["cos-margin", "arc-margin", "combined"])
    def test_gradients_match_differences(self, name):
        assert gradcheck_loss(name, trials=30, seed=1).ok(1e-5)

    def test_batch_is_mean_of_rows(self):
        rng = np.random.default_rng(2)
        X = normalize_rows(rng.standard_normal((4, 3)))
        W = normalize_rows(rng.standard_normal((5, 3)))
        y = np.array([0, 3, 3, 1])
        cfg = S2CConfig(scale=8, margin=0.2)
        batch = s2c_batch_loss(X, W, y, cfg)
        rows = [s2c_loss(X[i], W, int(y[i]), cfg) for i in range(4)]
        assert batch.value == pytest.approx(np.mean([r.value for r in rows]), abs=1e-14)
        np.testing.assert_allclose(batch.d_W, sum(r.d_W for r in rows) / 4, atol=1e-14)
        np.testing.assert_allclose(batch.d_x, np.stack([r.d_x for r in rows]) / 4, atol=1e-14)


class TestReductions:
    def test_plain_equals_s2s_softmax(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 8))
            G = normalize_rows(rng.standard_normal((n, 5)))
            x = normalize_rows(rng.standard_normal((1, 5)))[0]
            y = int(rng.integers(n))
            gamma = float(rng.choice([1.0, 16.0, 64.0]))
            a = s2c_loss(x, G, y, S2CConfig(scale=gamma, margin=0.0, kind="plain")).value
            sims = G @ x
            b = s2s_softmax_loss((sims[y], np.delete(sims, y)), LossConfig(gamma=gamma)).value
            assert abs(a - b) < 1e-12


class TestCombined:
    def test_average(self):
        a = LossOutput(1.0, d_pos=2.0, d_negs=np.array([1.0]), d_b=4.0)
        b = LossOutput(3.0, d_pos=0.0, d_negs=np.array([3.0]), d_b=0.0)
        out = combined_loss(a, b)
        assert out.value == 2.0 and out.d_pos == 1.0 and out.d_b == 2.0
        np.testing.assert_array_equal(out.d_negs, [2.0])

    def test_idempotent(self):
        a = LossOutput(1.5, d_x=np.array([1.0, -1.0]))
        out = combined_loss(a, a)
        assert out.value == 1.5
        np.testing.assert_array_equal(out.d_x, a.d_x)

    def test_threshold_gradient_halved(self):
        s2c = s2c_loss(np.array([1.0, 0.0]), np.eye(2), 0, S2CConfig(scale=4))
        uss = uss_loss((0.5, [0.1, -0.2]), 0.3, LossConfig(gamma=4.0))
        out = combined_loss(s2c, uss)
        assert out.d_b == 0.5 * uss.d_b
        np.testing.assert_array_equal(out.d_x, 0.5 * s2c.d_x)


class TestProxies:
    def test_mean_init(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.0, -1.0]])
        W = init_proxies(X, np.array([0, 0, 1, 1]), 2)
        np.testing.assert_allclose(W, [[math.sqrt(0.5), math.sqrt(0.5)], [0.0, -1.0]], atol=1e-15)

    def test_random_init_unit_rows(self):
        W = init_proxies(np.zeros((2, 6)), np.array([0, 1]), 4, np.random.default_rng(0), "random")
        np.testing.assert_allclose(np.linalg.norm(W, axis=1), 1.0, atol=1e-12)

    def test_unknown_mode(self):
        with pytest.raises(InvalidConfig):
            init_proxies(np.eye(2), np.array([0, 1]), 2, mode="zeros")
