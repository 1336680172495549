import math

import numpy as np
import pytest

from confoundnet.errors import (
    DimensionError,
    GeometryError,
    LabelError,
    NumericsError,
)
from confoundnet.tensor_engine import (
    LayerParams,
    Tensor,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    grad_check,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    softmax_logloss,
)
from oracles import conv2d_naive, softmax_logloss_longdouble


class TestTensor:
    def test_invariant_shapes(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        assert t.data.size == t.grad.size == 6
        assert t.grad.shape == t.data.shape
        assert np.all(t.grad == 0.0)

    def test_zero_grad(self):
        t = Tensor(np.ones((2, 2)))
        t.grad += 3.0
        t.zero_grad()
        assert np.all(t.grad == 0.0)


class TestConv2d:
    def test_zero_input_gives_bias(self):
        x = Tensor(np.zeros((1, 1, 3, 3)))
        params = LayerParams(np.random.default_rng(0).standard_normal((2, 1, 3, 3)), np.array([1.5, -2.0]))
        out, _ = conv2d_forward(x, params, stride=1, pad=1)
        assert np.all(out.data[0, 0] == 1.5)
        assert np.all(out.data[0, 1] == -2.0)

    def test_scalar_case(self):
        x = Tensor(np.full((1, 1, 1, 1), 2.0))
        params = LayerParams(np.full((1, 1, 1, 1), 3.0), np.array([1.0]))
        out, ctx = conv2d_forward(x, params)
        assert out.data.item() == 7.0  # 2*3 + 1
        conv2d_backward(ctx, np.ones((1, 1, 1, 1)))
        assert params.weights.grad.item() == 2.0
        assert x.grad.item() == 3.0
        assert params.bias.grad.item() == 1.0

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out, _ = conv2d_forward(Tensor(x), LayerParams(w, b), stride=1, pad=1)
        assert np.abs(out.data - conv2d_naive(x, w, b, stride=1, pad=1)).max() < 1e-12

    @pytest.mark.parametrize("trial", range(10))
    def test_naive_oracle_random_shapes(self, trial):
        rng = np.random.default_rng([21, trial])
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 3))
        k = int(rng.integers(1, 4))
        ho = int(rng.integers(2, 5))
        h = stride * (ho - 1) + k - 2 * pad
        while h <= 0:
            ho += 1
            h = stride * (ho - 1) + k - 2 * pad
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        x = rng.standard_normal((2, cin, h, h))
        w = rng.standard_normal((cout, cin, k, k))
        b = rng.standard_normal(cout)
        out, _ = conv2d_forward(Tensor(x), LayerParams(w, b), stride=stride, pad=pad)
        assert np.abs(out.data - conv2d_naive(x, w, b, stride, pad)).max() < 1e-12

    def test_zero_grad_out_accumulates_nothing(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        params = LayerParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
        out, ctx = conv2d_forward(x, params, pad=1)
        conv2d_backward(ctx, np.zeros_like(out.data))
        assert np.all(params.weights.grad == 0.0)
        assert np.all(x.grad == 0.0)

    def test_gradients_accumulate(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((1, 1, 4, 4)))
        params = LayerParams(rng.standard_normal((1, 1, 3, 3)), rng.standard_normal(1))
        out, ctx = conv2d_forward(x, params)
        g = rng.standard_normal(out.data.shape)
        first = conv2d_backward(ctx, g)
        conv2d_backward(ctx, g)
        assert np.allclose(x.grad, 2.0 * first)

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        params = LayerParams(np.zeros((1, 3, 3, 3)), np.zeros(1))
        with pytest.raises(DimensionError):
            conv2d_forward(x, params)

    def test_non_integer_output_geometry(self):
        x = Tensor(np.zeros((1, 1, 5, 5)))
        params = LayerParams(np.zeros((1, 1, 2, 2)), np.zeros(1))
        with pytest.raises(GeometryError):
            conv2d_forward(x, params, stride=2)

    def test_grad_out_shape_mismatch(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        params = LayerParams(np.zeros((1, 1, 3, 3)), np.zeros(1))
        _, ctx = conv2d_forward(x, params)
        with pytest.raises(DimensionError):
            conv2d_backward(ctx, np.zeros((1, 1, 3, 3)))

    def test_nan_escape_raises(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        x.data[0, 0, 0, 0] = np.nan
        params = LayerParams(np.ones((1, 1, 2, 2)), np.zeros(1))
        with pytest.raises(NumericsError):
            conv2d_forward(x, params)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        a, _ = conv2d_forward(Tensor(x), LayerParams(w, b), pad=1)
        c, _ = conv2d_forward(Tensor(x), LayerParams(w, b), pad=1)
        assert np.array_equal(a.data, c.data)


class TestRelu:
    def test_forward_values(self):
        out, _ = relu_forward(Tensor(np.array([[-1.0, 0.0, 2.0]])))
        assert np.array_equal(out.data, [[0.0, 0.0, 2.0]])

    def test_subgradient_zero_at_zero(self):
        x = Tensor(np.array([[-1.0, 0.0, 2.0]]))
        _, ctx = relu_forward(x)
        dx = relu_backward(ctx, np.array([[5.0, 5.0, 5.0]]))
        assert np.array_equal(dx, [[0.0, 0.0, 5.0]])


class TestMaxpool2:
    def test_window_max_and_routing(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out, ctx = maxpool2_forward(x)
        assert out.data.item() == 4.0
        maxpool2_backward(ctx, np.ones((1, 1, 1, 1)))
        assert np.array_equal(x.grad[0, 0], [[0.0, 0.0], [0.0, 1.0]])

    def test_tie_breaks_to_first_row_major(self):
        x = Tensor(np.full((1, 1, 2, 2), 7.0))
        out, ctx = maxpool2_forward(x)
        assert out.data.item() == 7.0
        maxpool2_backward(ctx, np.ones((1, 1, 1, 1)))
        assert np.array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_odd_dims_rejected(self):
        with pytest.raises(GeometryError):
            maxpool2_forward(Tensor(np.zeros((1, 1, 3, 4))))


class TestFc:
    def test_identity(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0]]))
        params = LayerParams(np.eye(3), np.zeros(3))
        out, _ = fc_forward(x, params)
        assert np.array_equal(out.data, x.data)

    def test_hand_product(self):
        x = Tensor(np.array([[1.0, 2.0]]))
        params = LayerParams(np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2))
        out, _ = fc_forward(x, params)
        assert np.array_equal(out.data, [[3.0, 2.0]])

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            fc_forward(Tensor(np.zeros((1, 3))), LayerParams(np.zeros((2, 4)), np.zeros(2)))

    def test_backward_values(self):
        x = Tensor(np.array([[1.0, 2.0]]))
        params = LayerParams(np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2))
        _, ctx = fc_forward(x, params)
        dx = fc_backward(ctx, np.array([[1.0, 0.0]]))
        assert np.array_equal(dx, [[1.0, 1.0]])
        assert np.array_equal(params.weights.grad, [[1.0, 2.0], [0.0, 0.0]])
        assert np.array_equal(params.bias.grad, [1.0, 0.0])


class TestSoftmaxLogloss:
    def test_symmetric_logits(self):
        loss, grad = softmax_logloss(Tensor(np.array([[0.0, 0.0]])), [0])
        assert abs(loss - math.log(2.0)) < 1e-12
        assert np.allclose(grad, [[-0.5, 0.5]], atol=1e-12)

    def test_stabilized_no_overflow(self):
        loss, grad = softmax_logloss(Tensor(np.array([[1000.0, 0.0]])), [0])
        assert 0.0 <= loss < 1e-8
        assert np.all(np.isfinite(grad))

    def test_matches_longdouble_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((5, 4)) * 3.0
        labels = rng.integers(0, 4, 5)
        loss, _ = softmax_logloss(Tensor(x), labels)
        assert abs(loss - softmax_logloss_longdouble(x, labels)) < 1e-10

    def test_loss_nonnegative_and_shift_invariant(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((8, 5))
        labels = rng.integers(0, 5, 8)
        loss, grad = softmax_logloss(Tensor(x), labels)
        assert loss >= 0.0
        shifted, _ = softmax_logloss(Tensor(x + 13.25), labels)
        assert abs(loss - shifted) < 1e-10
        assert np.abs(grad.sum(axis=1)).max() < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            softmax_logloss(Tensor(np.zeros((1, 3))), [3])
        with pytest.raises(LabelError):
            softmax_logloss(Tensor(np.zeros((1, 3))), [-1])

    def test_needs_two_classes(self):
        with pytest.raises(DimensionError):
            softmax_logloss(Tensor(np.zeros((1, 1))), [0])


class TestGradCheck:
    def test_linear_function_noise_floor(self):
        x = np.array([1.0, -2.0, 0.5])

        def fn(arrays):
            return float(3.0 * arrays[0].sum()), [np.full_like(arrays[0], 3.0)]

        assert grad_check(fn, [x]) < 1e-9

    def test_detects_wrong_gradient(self):
        x = np.array([1.0, -2.0])

        def fn(arrays):
            return float((arrays[0] ** 2).sum()), [3.0 * arrays[0]]  # should be 2x

        assert grad_check(fn, [x]) > 0.1


class TestKernelGradients:
    """Every backward kernel against central differences, 20 seeds each."""

    def test_conv_fc_softmax_smooth(self):
        from confoundnet.gradcheck import _check_conv, _check_fc, _check_softmax

        for seed in range(20):
            assert _check_conv(seed) < 1e-6
            assert _check_fc(seed) < 1e-6
            assert _check_softmax(seed) < 1e-6

    def test_relu_maxpool_nudged(self):
        from confoundnet.gradcheck import _check_maxpool, _check_relu

        for seed in range(20):
            assert _check_relu(seed) < 1e-4
            assert _check_maxpool(seed) < 1e-4
