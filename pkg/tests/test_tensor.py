"""Tensor engine: forward semantics and gradients vs the finite-difference oracle."""

import math

import numpy as np
import pytest

from nftrain import tensor as T
from nftrain.errors import ContractError, NonFiniteError, ShapeError

from oracles import finite_difference_grad, max_relative_error, reference_cross_correlate


def tensors(*arrays, grad=True):
    return [T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad) for a in arrays]


class TestLinear:
    def test_identity_weights(self):
        x, w, b = tensors([[1.0, 2.0]], [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
        y = T.linear(x, w, b)
        np.testing.assert_array_equal(y.data, [[1.0, 2.0]])

    def test_hand_sum(self):
        x, w, b = tensors([[1.0, 1.0]], [[2.0], [3.0]], [1.0])
        np.testing.assert_array_equal(T.linear(x, w, b).data, [[6.0]])

    def test_grad_w_matches_columnwise_input_sums(self):
        rng = np.random.default_rng(3)
        x = T.Tensor(rng.normal(size=(5, 4)))
        w = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        T.tsum(T.linear(x, w)).backward()
        col_sums = np.tile(x.data.sum(axis=0)[:, None], (1, 3))
        assert max_relative_error(w.grad, col_sums) < 1e-12

    def test_grad_vs_finite_differences(self):
        rng = np.random.default_rng(7)
        xv, wv, bv = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
        coeffs = rng.normal(size=(5, 3))  # random linear functional -> scalar

        def f(x, w, b):
            return float((np.asarray(x) @ np.asarray(w) + b).ravel() @ coeffs.ravel())

        x, w, b = tensors(xv, wv, bv)
        out = T.linear(x, w, b)
        T.tsum(T.mul(out, T.Tensor(coeffs))).backward()
        for wrt, t in [(0, x), (1, w), (2, b)]:
            fd = finite_difference_grad(f, [xv, wv, bv], wrt)
            assert max_relative_error(t.grad, fd) < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        x, w = tensors(np.ones((2, 3)), np.ones((4, 5)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.linear(x, w)


class TestConv2d:
    def test_sum_of_ones(self):
        x, k = tensors(np.ones((1, 2, 2, 1)), np.ones((2, 2, 1, 1)))
        y = T.conv2d(x, k, stride=1, pad=0)
        np.testing.assert_array_equal(y.data, [[[[4.0]]]])

    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        xv = rng.normal(size=(2, 6, 6, 3))
        kv = np.zeros((3, 3, 3, 3))
        for c in range(3):
            kv[1, 1, c, c] = 1.0
        x, k = tensors(xv, kv)
        y = T.conv2d(x, k, stride=1, pad=1)
        np.testing.assert_allclose(y.data, xv, atol=1e-14)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_forward_matches_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(11)
        xv = rng.normal(size=(2, 7, 8, 3))
        kv = rng.normal(size=(3, 3, 3, 4))
        y = T.conv2d(*tensors(xv, kv), stride=stride, pad=pad)
        np.testing.assert_allclose(y.data, reference_cross_correlate(xv, kv, stride, pad), atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0), (3, 1)])
    def test_grads_vs_finite_differences(self, stride, pad):
        rng = np.random.default_rng(5)
        xv = rng.normal(size=(2, 5, 5, 3))
        kv = rng.normal(size=(3, 3, 3, 4))
        weights = None

        def f(x, k):
            out = reference_cross_correlate(x, k, stride, pad)
            return float((out * weights).sum())

        x, k = tensors(xv, kv)
        y = T.conv2d(x, k, stride=stride, pad=pad)
        weights = np.asarray(np.random.default_rng(1).normal(size=y.data.shape))
        T.tsum(T.mul(y, T.Tensor(weights))).backward()
        fd_x = finite_difference_grad(f, [xv, kv], 0)
        fd_k = finite_difference_grad(f, [xv, kv], 1)
        assert max_relative_error(x.grad, fd_x) < 1e-5
        assert max_relative_error(k.grad, fd_k) < 1e-5

    def test_kernel_larger_than_padded_input(self):
        x, k = tensors(np.ones((1, 3, 3, 1)), np.ones((5, 5, 1, 1)))
        with pytest.raises(ShapeError):
            T.conv2d(x, k, stride=1, pad=0)


class TestElementwiseAndPooling:
    def test_relu(self):
        (t,) = tensors([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(T.relu(t).data, [0.0, 0.0, 2.0])

    def test_relu_grad(self):
        (t,) = tensors([-1.0, 0.5, 2.0])
        T.tsum(T.relu(t)).backward()
        np.testing.assert_array_equal(t.grad, [0.0, 1.0, 1.0])

    def test_avg_pool_of_ones(self):
        (t,) = tensors(np.ones((1, 4, 4, 1)))
        y = T.avg_pool2d(t, (2, 2))
        np.testing.assert_array_equal(y.data, np.ones((1, 2, 2, 1)))

    def test_avg_pool_non_divisible_grad(self):
        rng = np.random.default_rng(2)
        xv = rng.normal(size=(2, 7, 5, 3))
        weights = rng.normal(size=(2, 3, 2, 3))

        def f(x):
            t = T.Tensor(x)
            return float((T.avg_pool2d(t, (3, 2)).data * weights).sum())

        (t,) = tensors(xv)
        T.tsum(T.mul(T.avg_pool2d(t, (3, 2)), T.Tensor(weights))).backward()
        fd = finite_difference_grad(lambda x: f(x), [xv], 0)
        assert max_relative_error(t.grad, fd) < 1e-6

    def test_max_pool_forward_and_grad(self):
        rng = np.random.default_rng(4)
        xv = rng.normal(size=(2, 6, 6, 3))
        (t,) = tensors(xv)
        y = T.max_pool2d(t, 2)
        expected = xv.reshape(2, 3, 2, 3, 2, 3).max(axis=(2, 4))
        np.testing.assert_allclose(y.data, expected, atol=1e-14)
        weights = rng.normal(size=y.data.shape)
        T.tsum(T.mul(y, T.Tensor(weights))).backward()
        fd = finite_difference_grad(
            lambda x: float((np.asarray(x).reshape(2, 3, 2, 3, 2, 3).max(axis=(2, 4)) * weights).sum()),
            [xv],
            0,
        )
        assert max_relative_error(t.grad, fd) < 1e-6

    def test_pool_window_exceeding_input(self):
        (t,) = tensors(np.ones((1, 2, 2, 1)))
        with pytest.raises(ShapeError):
            T.max_pool2d(t, 4)
        with pytest.raises(ShapeError):
            T.avg_pool2d(t, (3, 3))

    def test_scale_quarter(self):
        (t,) = tensors([4.0, -8.0])
        s = 3
        np.testing.assert_array_equal(T.scale(t, 1.0 / (s + 1)).data, [1.0, -2.0])

    def test_flatten_round_trip_grad(self):
        rng = np.random.default_rng(9)
        xv = rng.normal(size=(3, 2, 2, 2))
        (t,) = tensors(xv)
        weights = rng.normal(size=(3, 8))
        T.tsum(T.mul(T.flatten(t), T.Tensor(weights))).backward()
        np.testing.assert_allclose(t.grad, weights.reshape(xv.shape), atol=1e-14)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        logits = T.Tensor(np.zeros((4, 10)))
        loss = T.softmax_cross_entropy(logits, np.zeros(4, dtype=int))
        assert loss.item() == pytest.approx(math.log(10), abs=1e-12)

    def test_huge_logit_is_stable(self):
        logits = T.Tensor([[1e9, 0.0]])
        loss = T.softmax_cross_entropy(logits, [0])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_two_class_hand_value(self):
        logits = T.Tensor([[0.95, -0.05]])
        loss = T.softmax_cross_entropy(logits, [0])
        assert loss.item() == pytest.approx(math.log(1 + math.exp(-1.0)), abs=1e-9)

    def test_shift_invariance(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=(6, 5))
        labels = rng.integers(0, 5, size=6)
        base = T.softmax_cross_entropy(T.Tensor(logits), labels).item()
        for c in (1.0, -3.5, 1e3):
            shifted = T.softmax_cross_entropy(T.Tensor(logits + c), labels).item()
            assert shifted == pytest.approx(base, abs=1e-10)

    def test_grad_vs_finite_differences(self):
        rng = np.random.default_rng(13)
        lv = rng.normal(size=(5, 7))
        labels = rng.integers(0, 7, size=5)
        logits = T.Tensor(lv, requires_grad=True)
        T.softmax_cross_entropy(logits, labels).backward()
        fd = finite_difference_grad(
            lambda l: _ce_oracle(l, labels), [lv], 0
        )
        assert max_relative_error(logits.grad, fd) < 1e-6

    def test_label_out_of_range(self):
        logits = T.Tensor(np.zeros((2, 3)))
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(logits, [0, 3])


def _ce_oracle(logits, labels):
    logits = np.asarray(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


class TestBackwardContract:
    def test_square_grad(self):
        w = T.Tensor([3.0], requires_grad=True)
        T.tsum(T.mul(w, w)).backward()
        np.testing.assert_allclose(w.grad, [6.0])

    def test_unused_parameter_gets_no_grad(self):
        w = T.Tensor([3.0], requires_grad=True)
        unused = T.Tensor([1.0], requires_grad=True)
        T.tsum(T.mul(w, w)).backward()
        assert unused.grad is None

    def test_repeated_backward_accumulates(self):
        w = T.Tensor([3.0], requires_grad=True)
        loss = T.tsum(T.mul(w, w))
        loss.backward()
        first = w.grad.copy()
        loss.backward()
        np.testing.assert_allclose(w.grad, 2 * first)

    def test_backward_rejects_non_scalar(self):
        t = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            t.backward()

    def test_shared_subexpression_fanout(self):
        # y = (w*w) + (w*w): d/dw = 4w
        w = T.Tensor([2.0], requires_grad=True)
        sq = T.mul(w, w)
        T.tsum(T.add(sq, sq)).backward()
        np.testing.assert_allclose(w.grad, [8.0])

    def test_debug_checks_catch_non_finite(self):
        T.set_debug_checks(True)
        try:
            t = T.Tensor([1e308], requires_grad=True)
            with pytest.raises(NonFiniteError):
                T.mul(t, t)
        finally:
            T.set_debug_checks(False)


class TestDeterminism:
    def test_conv_bit_identical_across_runs(self):
        rng = np.random.default_rng(1)
        xv = rng.normal(size=(4, 9, 9, 8)).astype(np.float32)
        kv = rng.normal(size=(3, 3, 8, 8)).astype(np.float32)
        runs = [T.conv2d(T.Tensor(xv), T.Tensor(kv), 1, 1).data.tobytes() for _ in range(3)]
        assert runs[0] == runs[1] == runs[2]

    def test_float32_inputs_stay_float32(self):
        x = T.Tensor(np.ones((2, 4), dtype=np.float32))
        w = T.Tensor(np.ones((4, 3), dtype=np.float32))
        assert T.linear(x, w).data.dtype == np.float32
