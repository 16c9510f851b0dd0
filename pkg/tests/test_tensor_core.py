import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpate import tensor_core as tc
from qpate.errors import ConfigurationError, UsageError


def conv_reference(x, w, b):
    """Six nested loops over (n, f, i, j, c, ki/kj), zero padding."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    pad = k // 2
    out = np.zeros((n, f, h, wd))
    for ni in range(n):
        for fi in range(f):
            for i in range(h):
                for j in range(wd):
                    acc = b[fi]
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                ii, jj = i + ki - pad, j + kj - pad
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[ni, ci, ii, jj] * w[fi, ci, ki, kj]
                    out[ni, fi, i, j] = acc
    return out


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f at array x (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_zero_input_gives_zero_output(self, rng):
        w = rng.normal(size=(2, 1, 3, 3))
        out, _ = tc.conv2d_forward(np.zeros((1, 1, 3, 3)), w, np.zeros(2))
        assert np.all(out == 0)

    def test_identity_1x1(self, rng):
        x = rng.normal(size=(2, 1, 5, 5))
        out, _ = tc.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    @pytest.mark.parametrize("k", [1, 3])
    def test_matches_nested_loops(self, rng, k):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        out, _ = tc.conv2d_forward(x, w, b)
        np.testing.assert_allclose(out, conv_reference(x, w, b), atol=1e-12, rtol=0)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            tc.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_backward_needs_cache(self):
        with pytest.raises(UsageError):
            tc.conv2d_backward(np.zeros((1, 1, 2, 2)), None)
        layer = tc.Conv2d(1, 1, 3, np.random.default_rng(0))
        with pytest.raises(UsageError):
            layer.backward(np.zeros((1, 1, 2, 2)))

    def test_zero_grad_out(self, rng):
        x = rng.normal(size=(2, 2, 4, 4))
        _, cache = tc.conv2d_forward(x, rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
        gx, gw, gb = tc.conv2d_backward(np.zeros((2, 3, 4, 4)), cache)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_single_pixel_identity(self):
        x = np.zeros((1, 1, 4, 4))
        _, cache = tc.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        g = np.zeros((1, 1, 4, 4))
        g[0, 0, 2, 1] = 1.0
        gx, _, _ = tc.conv2d_backward(g, cache)
        np.testing.assert_array_equal(gx, g)

    @pytest.mark.parametrize("k", [1, 3])
    def test_backward_finite_differences(self, rng, k):
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(2, 3, k, k))
        b = rng.normal(size=2)
        up = rng.normal(size=(2, 2, 5, 5))
        loss = lambda: float((tc.conv2d_forward(x, w, b)[0] * up).sum())
        _, cache = tc.conv2d_forward(x, w, b)
        gx, gw, gb = tc.conv2d_backward(up, cache)
        assert rel_err(gx, numeric_grad(loss, x)) < 1e-6
        assert rel_err(gw, numeric_grad(loss, w)) < 1e-6
        assert rel_err(gb, numeric_grad(loss, b)) < 1e-6

    def test_1x1_conv_is_per_pixel_dense(self, rng):
        x = rng.normal(size=(3, 4, 5, 6))
        w = rng.normal(size=(2, 4, 1, 1))
        b = rng.normal(size=2)
        out, _ = tc.conv2d_forward(x, w, b)
        pixels = x.transpose(0, 2, 3, 1).reshape(-1, 4)
        dense, _ = tc.dense_forward(pixels, w[:, :, 0, 0].T, b)
        np.testing.assert_allclose(out, dense.reshape(3, 5, 6, 2).transpose(0, 3, 1, 2),
                                   atol=1e-12)


class TestBatchNorm:
    def test_constant_channel_gives_shift(self):
        x = np.full((4, 1, 3, 3), 7.0)
        out, _ = tc.batchnorm_forward(x, np.array([2.0]), np.array([0.5]),
                                      np.zeros(1), np.ones(1), train=True)
        np.testing.assert_allclose(out, 0.5)

    def test_standardised_input_passes_through(self, rng):
        x = rng.normal(size=(8, 2, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out, _ = tc.batchnorm_forward(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_batch_of_one_rejected_in_training(self):
        with pytest.raises(ConfigurationError):
            tc.batchnorm_forward(np.zeros((1, 1, 2, 2)), np.ones(1), np.zeros(1),
                                 np.zeros(1), np.ones(1), True)

    def test_inference_uses_running_stats(self):
        x = np.full((1, 1, 2, 2), 3.0)
        out, cache = tc.batchnorm_forward(x, np.ones(1), np.zeros(1), np.array([1.0]),
                                          np.array([4.0]), train=False)
        assert cache is None
        np.testing.assert_allclose(out, 2.0 / np.sqrt(4.0 + tc.BN_EPS))

    def test_running_variance_stays_positive(self, rng):
        layer = tc.BatchNorm2d(3)
        for _ in range(20):
            layer.forward(np.zeros((2, 3, 2, 2)))
        assert np.all(layer.buffers["running_var"] > 0)

    def test_backward_finite_differences(self, rng):
        x = rng.normal(size=(4, 3, 3, 3))
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        up = rng.normal(size=x.shape)

        def loss():
            out, _ = tc.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), True)
            return float((out * up).sum())

        _, cache = tc.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), True)
        gx, gg, gb = tc.batchnorm_backward(up, cache)
        assert rel_err(gx, numeric_grad(loss, x)) < 1e-5
        assert rel_err(gg, numeric_grad(loss, gamma)) < 1e-5
        assert rel_err(gb, numeric_grad(loss, beta)) < 1e-5


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(tc.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])

    def test_leaky(self):
        np.testing.assert_allclose(tc.leaky_relu(np.array([-1.0, 0.0, 2.0]), 0.01),
                                   [-0.01, 0, 2])

    def test_leaky_gradient(self):
        assert tc.leaky_relu_grad(np.array(-1.0), 0.01) == 0.01

    def test_negative_slope_rejected(self):
        with pytest.raises(UsageError):
            tc.leaky_relu(np.zeros(2), -0.1)

    def test_maxpool_routes_gradient_to_max(self):
        x = np.array([[[[1.0, 5.0], [2.0, 3.0]]]])
        pool = tc.MaxPool2d()
        assert pool.forward(x)[0, 0, 0, 0] == 5.0
        np.testing.assert_array_equal(pool.backward(np.ones((1, 1, 1, 1))),
                                      [[[[0, 1], [0, 0]]]])


class TestDense:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        out, _ = tc.dense_forward(x, np.eye(4), np.zeros(4))
        np.testing.assert_array_equal(out, x)

    def test_zero_input_gives_bias(self):
        out, _ = tc.dense_forward(np.zeros((2, 3)), np.ones((3, 2)), np.array([1.0, -2.0]))
        np.testing.assert_array_equal(out, [[1, -2], [1, -2]])

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            tc.dense_forward(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))

    def test_backward_finite_differences(self, rng):
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
        up = rng.normal(size=(3, 5))
        loss = lambda: float((tc.dense_forward(x, w, b)[0] * up).sum())
        gx, gw, gb = tc.dense_backward(up, (x, w))
        assert rel_err(gx, numeric_grad(loss, x)) < 1e-6
        assert rel_err(gw, numeric_grad(loss, w)) < 1e-6
        assert rel_err(gb, numeric_grad(loss, b)) < 1e-6


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = tc.cross_entropy(np.array([[0.0, 0.0]]), [0])
        assert loss == pytest.approx(np.log(2), abs=1e-15)

    def test_extreme_logits_are_stable(self):
        loss, grad = tc.cross_entropy(np.array([[1000.0, -1000.0]]), [0])
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(grad))

    def test_bad_label(self):
        with pytest.raises(UsageError):
            tc.cross_entropy(np.zeros((1, 2)), [2])

    def test_gradient_finite_differences(self, rng):
        logits = rng.normal(size=(5, 3))
        labels = rng.integers(0, 3, 5)
        _, grad = tc.cross_entropy(logits, labels)
        num = numeric_grad(lambda: tc.cross_entropy(logits, labels)[0], logits)
        assert rel_err(grad, num) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.integers(0, 1))
    def test_loss_nonnegative(self, vals, label):
        loss, _ = tc.cross_entropy(np.array(vals).reshape(2, 2), [label, 1 - label])
        assert loss >= 0


class TestAdamW:
    def test_zero_gradient_no_decay_is_noop(self):
        cfg = tc.AdamWConfig(weight_decay=0.0)
        p, _, _ = tc.adamw_step(np.array([1.5, -2.0]), np.zeros(2), np.zeros(2), np.zeros(2),
                                cfg, 1)
        np.testing.assert_array_equal(p, [1.5, -2.0])

    def test_single_step_by_hand(self):
        # p(1 - lr*wd) - lr * g / (|g| + eps) with p=1, g=0.5, lr=1e-3, wd=1e-4
        p, m, v = tc.adamw_step(np.array([1.0]), np.array([0.5]), np.zeros(1), np.zeros(1),
                                tc.AdamWConfig(), 1)
        assert p[0] == pytest.approx(0.99899990002, abs=1e-14)
        assert m[0] == pytest.approx(0.05) and v[0] == pytest.approx(0.00025)

    def test_decoupled_decay(self):
        cfg = tc.AdamWConfig()
        p, _, _ = tc.adamw_step(np.array([3.0]), np.zeros(1), np.zeros(1), np.zeros(1), cfg, 1)
        assert p[0] == pytest.approx(3.0 * (1 - 1e-3 * 1e-4), abs=1e-15)

    def test_deterministic(self, rng):
        args = [rng.normal(size=4) for _ in range(3)] + [rng.random(4)]
        a = tc.adamw_step(*args, tc.AdamWConfig(), 3)
        b = tc.adamw_step(*args, tc.AdamWConfig(), 3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_step_count_starts_at_one(self):
        with pytest.raises(UsageError):
            tc.adamw_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1),
                          tc.AdamWConfig(), 0)

    def test_optimizer_updates_in_place(self):
        w = np.ones(3)
        opt = tc.AdamW([w])
        opt.step([np.ones(3)])
        assert np.all(w < 1)


def test_sequential_backward_matches_finite_differences(rng):
    net = tc.Sequential([tc.Conv2d(1, 2, 3, rng), tc.BatchNorm2d(2), tc.LeakyReLU(),
                         tc.MaxPool2d(), tc.Flatten(), tc.Dense(8, 2, rng)])
    x = rng.normal(size=(3, 1, 4, 4))
    labels = np.array([0, 1, 1])

    def loss():
        return tc.cross_entropy(net.forward(x, train=True), labels)[0]

    _, grad = tc.cross_entropy(net.forward(x, train=True), labels)
    gx = net.backward(grad)
    w = net.layers[0].params["weight"]
    gw = net.layers[0].grads["weight"].copy()
    assert rel_err(gx, numeric_grad(loss, x)) < 1e-5
    assert rel_err(gw, numeric_grad(loss, w)) < 1e-5
