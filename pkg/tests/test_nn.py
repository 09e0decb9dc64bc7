import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textcert.nn import (AdamState, AvgPool, Conv1d, DimensionError, Linear, Network, ReLU, adam_step,
                         backward, cross_entropy, forward)

from conftest import jitter_biases, tiny_net


def direct_conv(x, kernel):
    """Valid convolution by explicit summation; kernel is (width, cin, cout)."""
    w = kernel.shape[0]
    out = np.zeros((len(x) - w + 1, kernel.shape[2]))
    for t in range(out.shape[0]):
        for j in range(w):
            for ci in range(kernel.shape[1]):
                for co in range(kernel.shape[2]):
                    out[t, co] += x[t + j, ci] * kernel[j, ci, co]
    return out


class TestForward:
    def test_identity_linear(self):
        lin = Linear(np.eye(2), np.zeros(2))
        net = Network([lin], 2)
        x = np.array([[0.3, -1.2]])
        np.testing.assert_array_equal(forward(net, x), x)

    def test_width_one_conv_scales(self):
        conv = Conv1d(np.array([[[2.0]]]), np.zeros(1))
        y = conv.forward(np.array([[1.0], [3.0], [-2.0]]))
        np.testing.assert_array_equal(y[:, 0], [2, 6, -4])

    def test_width_two_conv_matches_direct_sum(self):
        kernel = np.array([[[1.0]], [[-1.0]]])
        x = np.array([[4.0], [1.0], [5.0]])
        expected = direct_conv(x, kernel)
        np.testing.assert_array_equal(expected[:, 0], [3, -4])
        np.testing.assert_allclose(Conv1d(kernel, np.zeros(1)).forward(x), expected)

    def test_random_conv_matches_direct_sum(self, rng):
        kernel = rng.normal(size=(3, 4, 5))
        x = rng.normal(size=(9, 4))
        np.testing.assert_allclose(Conv1d(kernel, np.zeros(5)).forward(x), direct_conv(x, kernel), atol=1e-12)

    def test_shape_mismatch(self):
        conv = Conv1d(np.ones((2, 3, 1)), np.zeros(1))
        with pytest.raises(DimensionError):
            conv.forward(np.ones((5, 4)))
        with pytest.raises(DimensionError):
            conv.forward(np.ones((1, 3)))

    def test_final_layer_must_match_classes(self):
        with pytest.raises(DimensionError):
            Network([Linear(np.eye(2), np.zeros(2))], 3)
        with pytest.raises(DimensionError):
            Network([Linear(np.eye(2), np.zeros(2)), ReLU()], 2)

    def test_batch_equals_single(self, rng):
        net = tiny_net("ag-char")
        toks = rng.integers(0, 9, size=(4, 12))
        batch = forward(net, toks)
        for i in range(4):
            np.testing.assert_allclose(batch[i], forward(net, toks[i]), atol=1e-12)

    def test_determinism(self, rng):
        a = tiny_net("sst-char", seed=5, dtype=np.float32)
        b = tiny_net("sst-char", seed=5, dtype=np.float32)
        toks = rng.integers(0, 9, size=10)
        assert forward(a, toks).tobytes() == forward(b, toks).tobytes()


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(np.zeros(2), 0) == pytest.approx(math.log(2))

    def test_dominant_logit_no_overflow(self):
        v = cross_entropy(np.array([1000.0, 0.0]), 0)
        assert np.isfinite(v) and v == pytest.approx(0.0, abs=1e-12)

    def test_reference(self):
        ref = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
        assert cross_entropy(np.array([1.0, 2.0, 3.0]), 2) == pytest.approx(ref, rel=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros(2), 2)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.data())
    def test_nonnegative(self, logits, data):
        label = data.draw(st.integers(0, len(logits) - 1))
        assert cross_entropy(np.array(logits), label) >= 0


def numeric_grad(f, p, h=1e-5):
    g = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = p[i]
        p[i] = old + h
        a = f()
        p[i] = old - h
        b = f()
        p[i] = old
        g[i] = (a - b) / (2 * h)
    return g


def rel_err(a, b):
    # the floor absorbs central-difference round-off (~1e-11) on exactly-zero gradients
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))


class TestBackward:
    def test_zero_upstream(self, rng):
        net = tiny_net("ag-char")
        trace = forward(net, rng.integers(0, 9, size=12), record=True)
        g = backward(net, trace, np.zeros(net.class_count))
        assert all(np.all(v == 0) for v in g.params.values())
        assert np.all(g.input == 0)

    def test_linear_sum_gradient(self, rng):
        W = rng.normal(size=(3, 2))
        net = Network([Linear(W, np.zeros(2))], 2)
        x = rng.normal(size=3)
        trace = forward(net, x, record=True)
        g = backward(net, trace, np.ones(2))
        np.testing.assert_allclose(g.params["0.weight"], np.outer(x, np.ones(2)))
        np.testing.assert_allclose(g.params["0.bias"], np.ones(2))
        np.testing.assert_allclose(g.input, W.sum(axis=1))

    def test_missing_trace(self):
        net = Network([Linear(np.eye(2), np.zeros(2))], 2)
        with pytest.raises(ValueError):
            backward(net, None, np.ones(2))

    @pytest.mark.parametrize("arch", ["sst-word", "sst-char", "ag-char"])
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, arch, seed):
        rng = np.random.default_rng(seed)
        net = jitter_biases(tiny_net(arch, seed=seed, width=3 if arch != "ag-char" else 4), rng)
        toks = rng.integers(1, 9, size=(2, 10))
        labels = rng.integers(0, net.class_count, size=2)

        def loss():
            return float(cross_entropy(forward(net, toks), labels).sum())

        trace = forward(net, toks, record=True)
        _, g = cross_entropy(trace.logits, labels, grad=True)
        grads = backward(net, trace, g)
        for name, p in net.named_params().items():
            assert rel_err(grads.params[name], numeric_grad(loss, p)) < 1e-4, name
        x = net.embed(toks).copy()
        fx = lambda: float(cross_entropy(forward(net, x), labels).sum())
        assert rel_err(grads.input, numeric_grad(fx, x)) < 1e-4


class TestLayerProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
    def test_affine_linearity(self, seed, a, b):
        rng = np.random.default_rng(seed)
        conv = Conv1d(rng.normal(size=(3, 4, 5)), np.zeros(5))
        lin = Linear(rng.normal(size=(4, 3)), np.zeros(3))
        for layer, shape in ((conv, (7, 4)), (lin, (4,))):
            x, y = rng.normal(size=shape), rng.normal(size=shape)
            lhs = layer.forward(a * x + b * y)
            rhs = a * layer.forward(x) + b * layer.forward(y)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_layers(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 3))
        y = x + rng.uniform(0, 1, size=x.shape)
        for layer in (ReLU(), AvgPool()):
            assert np.all(layer.forward(x) <= layer.forward(y))


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = {"w": np.array([1.5, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState())
        np.testing.assert_array_equal(p["w"], [1.5, -2.0])

    def test_first_step(self):
        p = {"w": np.array([0.0])}
        st_ = AdamState(lr=0.1)
        adam_step(p, {"w": np.array([1.0])}, st_)
        assert p["w"][0] == pytest.approx(-0.1, rel=1e-6)
        assert st_.step == 1

    def test_two_steps_reference(self):
        def reference(theta, grads, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
            m = v = 0.0
            trace = []
            for t, g in enumerate(grads, 1):
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
                trace.append(theta)
            return trace

        p = {"w": np.array([0.7])}
        st_ = AdamState(lr=0.01)
        got = []
        for _ in range(2):
            adam_step(p, {"w": np.array([0.3])}, st_)
            got.append(float(p["w"][0]))
        np.testing.assert_allclose(got, reference(0.7, [0.3, 0.3]), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())
