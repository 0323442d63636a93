import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from usslearn.checks import gradcheck_network
from usslearn.errors import InvalidConfig, ShapeMismatch, StaleCache, ZeroNorm
from usslearn.model import SGD, EmbeddingNet, LrSchedule, default_sizes, lr_at, sgd_step


class TestForward:
    def test_identity_layer(self):
        net = EmbeddingNet([3, 3], seed=0)
        net.params["W0"][:] = np.eye(3)
        x = np.array([[0.6, 0.0, 0.8]])
        np.testing.assert_array_equal(net.forward(x), x)

    @settings(max_examples=50)
    @given(arrays(np.float64, (5, 6), elements=st.floats(-10, 10)))
    def test_unit_norm_outputs(self, X):
        net = EmbeddingNet([6, 7, 4], seed=1)
        try:
            out = net.forward(X)
        except ZeroNorm:
            return
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)

    def test_deterministic_init(self):
        a, b = EmbeddingNet([4, 5, 3], seed=9), EmbeddingNet([4, 5, 3], seed=9)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            EmbeddingNet([4, 3], seed=0).forward(np.ones((2, 5)))

    def test_zero_output(self):
        net = EmbeddingNet([2, 2], seed=0)
        with pytest.raises(ZeroNorm):
            net.forward(np.zeros((1, 2)))

    def test_bad_sizes(self):
        with pytest.raises(InvalidConfig):
            EmbeddingNet([4], seed=0)

    def test_default_sizes(self):
        assert default_sizes(32, 16) == [32, 128, 16]
        assert default_sizes(32, 16, [128, 8]) == [32, 128, 8, 16]


class TestBackward:
    def test_radial_gradient_vanishes(self):
        net = EmbeddingNet([4, 6, 3], seed=2)
        out = net.forward(np.random.default_rng(0).standard_normal((3, 4)))
        grads = net.backward(2.5 * out)
        for g in grads.values():
            np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_zero_upstream(self):
        net = EmbeddingNet([4, 6, 3], seed=2)
        net.forward(np.ones((2, 4)))
        assert all(not g.any() for g in net.backward(np.zeros((2, 3))).values())

    def test_stale_cache(self):
        net = EmbeddingNet([4, 3], seed=0)
        with pytest.raises(StaleCache):
            net.backward(np.zeros((1, 3)))
        net.forward(np.ones((1, 4)))
        net.bump()
        with pytest.raises(StaleCache):
            net.backward(np.zeros((1, 3)))

    def test_jacobian_vector_product(self):
        rng = np.random.default_rng(4)
        net = EmbeddingNet([5, 7, 3], seed=4)
        X = rng.standard_normal((4, 5))
        v = rng.standard_normal((4, 3))
        net.forward(X)
        grads = net.backward(v)
        h = 1e-6
        for key, p in net.params.items():
            direction = rng.standard_normal(p.shape)
            p += h * direction
            fp = np.sum(net.forward(X) * v)
            p -= 2 * h * direction
            fm = np.sum(net.forward(X) * v)
            p += h * direction
            num = (fp - fm) / (2 * h)
            ana = float(np.sum(grads[key] * direction))
            assert abs(num - ana) / max(1.0, abs(num), abs(ana)) < 1e-4

    @pytest.mark.parametrize("preset", ["uss", "bce-m", "unitsface"])
    def test_end_to_end(self, preset):
        assert gradcheck_network(preset, seeds=3).ok(1e-4)

    def test_broken_sign_is_detected(self):
        assert not gradcheck_network("uss", seeds=1, broken=True).ok(1e-4)


class TestSGD:
    def test_plain_step(self):
        p = {"w": np.array([1.0])}
        sgd_step(p, {"w": np.array([1.0])}, SGD(momentum=0.0, weight_decay=0.0), 0.1)
        assert p["w"][0] == pytest.approx(0.9, abs=1e-15)

    def test_momentum_recurrence(self):
        p = {"w": np.array([0.0])}
        opt = SGD(momentum=0.9, weight_decay=0.0)
        for _ in range(2):
            opt.step(p, {"w": np.array([1.0])}, 0.1)
        assert p["w"][0] == pytest.approx(-0.29, abs=1e-15)

    def test_weight_decay(self):
        p = {"w": np.array([1.0]), "b": np.array([1.0])}
        opt = SGD(momentum=0.0, weight_decay=5e-4, no_decay=frozenset({"b"}))
        opt.step(p, {"w": np.array([0.0]), "b": np.array([0.0])}, 0.1)
        assert p["w"][0] == pytest.approx(0.99995, abs=1e-15)
        assert p["b"][0] == 1.0

    def test_zero_lr_is_noop(self):
        p = {"w": np.array([0.3, -2.0])}
        before = p["w"].copy()
        opt = SGD()
        for _ in range(3):
            opt.step(p, {"w": np.array([5.0, 1.0])}, 0.0)
        np.testing.assert_array_equal(p["w"], before)

    def test_fixed_point_without_loss_or_decay(self):
        p = {"w": np.array([0.7])}
        SGD(weight_decay=0.0).step(p, {"w": np.array([0.0])}, 0.1)
        assert p["w"][0] == 0.7

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            SGD().step({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.1)

    def test_lr_scale(self):
        p = {"b": np.array([0.0])}
        SGD(momentum=0.0, weight_decay=0.0, lr_scale={"b": 0.5}).step(p, {"b": np.array([1.0])}, 0.1)
        assert p["b"][0] == pytest.approx(-0.05, abs=1e-16)


class TestSchedule:
    def test_poly_half(self):
        assert lr_at(LrSchedule("poly", base=0.1), 50, 100) == pytest.approx(0.025, abs=1e-16)

    def test_warmup_half(self):
        s = LrSchedule("warmup_poly", base=0.4, warmup=2)
        assert lr_at(s, 1, 20) == pytest.approx(0.2, abs=1e-16)
        assert lr_at(s, 2, 20) == pytest.approx(0.4, abs=1e-16)
        assert lr_at(s, 20, 20) == 0.0

    def test_step_milestones(self):
        s = LrSchedule("step", base=0.1, milestones=(16, 24))
        assert lr_at(s, 20, 28) == pytest.approx(0.01, abs=1e-17)
        assert lr_at(s, 15.99, 28) == 0.1
        assert lr_at(s, 24, 28) == pytest.approx(0.001, abs=1e-18)

    def test_step_with_warmup(self):
        s = LrSchedule("step", base=0.1, warmup=2)
        assert lr_at(s, 0.5, 28) == pytest.approx(0.025, abs=1e-16)
        assert lr_at(s, 2, 28) == 0.1

    def test_invalid(self):
        with pytest.raises(InvalidConfig):
            LrSchedule("cosine")
        with pytest.raises(InvalidConfig):
            lr_at(LrSchedule(), 30, 28)

    @given(st.sampled_from(["step", "poly", "warmup_poly"]), st.floats(0, 1))
    def test_non_negative(self, kind, frac):
        assert lr_at(LrSchedule(kind, base=0.1, warmup=1), 28 * frac, 28) >= 0
