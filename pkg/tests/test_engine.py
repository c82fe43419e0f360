"""
Autodiff core and differentiable primitives
Forward values are checked against direct numpy references, gradients with central differences
"""

import threading

import numpy as np
import pytest

from services.engine import functional as F
from services.engine.functional import GroupNormParams, conv_output_size, group_count
from services.engine.gradcheck import grad_check
from services.engine.tensor import Tensor, is_grad_enabled, no_grad
from services.errors import ConfigurationError, NumericalError, UsageError

PRIMITIVE_TOLERANCE = 1e-4


def weighted_sum(y: Tensor, weights: np.ndarray) -> Tensor:
    return F.reduce_sum(F.mul(y, weights))


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def naive_conv(x, w, b, stride, padding, dilation):
    batch, c_in, height, width = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = conv_output_size(height, kh, stride, padding, dilation)
    out_w = conv_output_size(width, kw, stride, padding, dilation)
    out = np.zeros((batch, c_out, out_h, out_w))
    for n in range(batch):
        for o in range(c_out):
            for i in range(out_h):
                for j in range(out_w):
                    total = b[o]
                    for c in range(c_in):
                        for p in range(kh):
                            for q in range(kw):
                                total += w[o, c, p, q] * xp[n, c, i * stride + p * dilation, j * stride + q * dilation]
                    out[n, o, i, j] = total
    return out


class TestTensorGraph:
    def test_shared_input_accumulates(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        y = F.reduce_sum(F.add(F.mul(x, x), x))
        y.backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_gradients_accumulate_across_graphs(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        F.reduce_sum(F.mul(x, 3.0)).backward()
        F.reduce_sum(F.mul(x, 4.0)).backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_second_backward_is_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = F.reduce_sum(F.mul(x, x))
        y.backward()
        with pytest.raises(UsageError):
            y.backward()

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            F.mul(x, 2.0).backward()

    def test_operators_delegate(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
        y = ((x * 2.0 - 1.0) @ x).relu().sum()
        y.backward()
        assert x.grad.shape == (2, 2)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = F.mul(x, x)
        assert y.creator is None
        assert not y.requires_grad
        assert is_grad_enabled()

    def test_no_grad_is_per_thread(self):
        seen = []
        with no_grad():
            worker = threading.Thread(target=lambda: seen.append(is_grad_enabled()))
            worker.start()
            worker.join()
            assert not is_grad_enabled()
        assert seen == [True]

    def test_non_finite_result_raises(self):
        x = Tensor(np.array([1e200]), requires_grad=True)
        with pytest.raises(NumericalError):
            F.mul(x, x)

    def test_grad_check_needs_scalar_closure(self, rng):
        x = leaf(rng, 3)
        with pytest.raises(UsageError):
            grad_check(lambda t: F.mul(t, 2.0), [x])


class TestPrimitiveGradients:
    def test_broadcast_add_and_mul(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 3)
        weights = rng.standard_normal((2, 3))
        assert grad_check(lambda p, q: weighted_sum(F.mul(F.add(p, q), q), weights), [a, b]) < PRIMITIVE_TOLERANCE

    def test_sub_and_neg(self, rng):
        a, b = leaf(rng, 4), leaf(rng, 4)
        weights = rng.standard_normal(4)
        assert grad_check(lambda p, q: weighted_sum(F.neg(F.sub(p, q)), weights), [a, b]) < PRIMITIVE_TOLERANCE

    def test_relu_away_from_kink(self, rng):
        x = Tensor(rng.choice([-1.0, 1.0], 12) * rng.uniform(0.2, 1.0, 12), requires_grad=True)
        weights = rng.standard_normal(12)
        assert grad_check(lambda t: weighted_sum(F.relu(t), weights), [x]) < PRIMITIVE_TOLERANCE

    def test_batched_matmul(self, rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
        weights = rng.standard_normal((2, 3, 5))
        assert grad_check(lambda p, q: weighted_sum(F.matmul(p, q), weights), [a, b]) < PRIMITIVE_TOLERANCE

    def test_softmax_rows(self, rng):
        x = leaf(rng, 2, 3, 5, low=-3.0, high=3.0)
        weights = rng.standard_normal((2, 3, 5))
        assert grad_check(lambda t: weighted_sum(F.softmax_rows(t), weights), [x]) < PRIMITIVE_TOLERANCE

    @pytest.mark.parametrize('stride,padding,dilation', [(1, 0, 1), (1, 1, 1), (2, 1, 2), (1, 3, 3)])
    def test_conv2d(self, rng, stride, padding, dilation):
        x, w, b = leaf(rng, 2, 3, 7, 7), leaf(rng, 4, 3, 3, 3), leaf(rng, 4)
        out_size = conv_output_size(7, 3, stride, padding, dilation)
        weights = rng.standard_normal((2, 4, out_size, out_size))

        def loss(xi, wi, bi):
            return weighted_sum(F.conv2d(xi, wi, bi, stride=stride, padding=padding, dilation=dilation), weights)

        assert grad_check(loss, [x, w, b]) < PRIMITIVE_TOLERANCE

    def test_max_pool2(self, rng):
        x = leaf(rng, 1, 2, 4, 6)
        weights = rng.standard_normal((1, 2, 2, 3))
        assert grad_check(lambda t: weighted_sum(F.max_pool2(t), weights), [x]) < PRIMITIVE_TOLERANCE

    @pytest.mark.parametrize('kernel', [2, 4])
    def test_avg_pool(self, rng, kernel):
        x = leaf(rng, 1, 2, 8, 8)
        weights = rng.standard_normal((1, 2, 8 // kernel, 8 // kernel))
        assert grad_check(lambda t: weighted_sum(F.avg_pool(t, kernel), weights), [x]) < PRIMITIVE_TOLERANCE

    def test_bilinear_upsample(self, rng):
        x = leaf(rng, 1, 2, 3, 3)
        weights = rng.standard_normal((1, 2, 12, 12))
        assert grad_check(lambda t: weighted_sum(F.bilinear_upsample(t, 4), weights), [x]) < PRIMITIVE_TOLERANCE

    @pytest.mark.parametrize('channels', [8, 32])
    def test_group_norm_with_affine(self, rng, channels):
        x = leaf(rng, 2, channels, 4, 4, low=-2.0, high=2.0)
        gamma = leaf(rng, channels, low=0.5, high=1.5)
        beta = leaf(rng, channels)
        weights = rng.standard_normal((2, channels, 4, 4))

        def loss(xi, g, b):
            return weighted_sum(F.group_normalize(xi, GroupNormParams(g, b)), weights)

        assert grad_check(loss, [x, gamma, beta]) < PRIMITIVE_TOLERANCE

    def test_shape_ops(self, rng):
        a, b = leaf(rng, 1, 2, 2, 3), leaf(rng, 1, 2, 2, 3)
        weights = rng.standard_normal((1, 4, 3, 2))

        def loss(p, q):
            merged = F.channel_shuffle(F.concat([p, q], axis=1), 2)
            return weighted_sum(F.transpose(merged, (0, 1, 3, 2)), weights)

        assert grad_check(loss, [a, b]) < PRIMITIVE_TOLERANCE

    def test_reduce_mean_over_axes(self, rng):
        x = leaf(rng, 2, 3, 4)
        weights = rng.standard_normal(3)
        assert grad_check(lambda t: weighted_sum(F.reduce_mean(t, axis=(0, 2)), weights), [x]) < PRIMITIVE_TOLERANCE

    def test_sampled_elements(self, rng):
        x = leaf(rng, 50)
        weights = rng.standard_normal(50)
        error = grad_check(lambda t: weighted_sum(F.mul(t, t), weights), [x], max_elements=5, seed=7)
        assert error < PRIMITIVE_TOLERANCE


class TestPrimitiveValues:
    @pytest.mark.parametrize('stride,padding,dilation', [(1, 0, 1), (2, 1, 1), (1, 2, 2)])
    def test_conv2d_matches_direct_sum(self, rng, stride, padding, dilation):
        x, w, b = rng.standard_normal((1, 2, 6, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, dilation=dilation)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, padding, dilation), atol=1e-12)

    def test_conv_output_size(self):
        assert conv_output_size(64, 3, 1, 1, 1) == 64
        assert conv_output_size(8, 3, 1, 3, 3) == 8
        assert conv_output_size(7, 3, 2, 0, 1) == 3

    def test_conv2d_rejects_bad_shapes(self):
        with pytest.raises(ConfigurationError):
            F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))
        with pytest.raises(ConfigurationError):
            F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), dilation=2)

    def test_max_pool_routes_ties_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        F.reduce_sum(F.max_pool2(x)).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_max_pool_needs_even_extent(self):
        with pytest.raises(ConfigurationError):
            F.max_pool2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_avg_pool_values(self):
        x = Tensor(np.arange(16, dtype=float).reshape(1, 1, 4, 4))
        np.testing.assert_allclose(F.avg_pool(x, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_bilinear_keeps_corners(self, rng):
        x = rng.standard_normal((1, 1, 3, 4))
        y = F.bilinear_upsample(Tensor(x), 4).data
        assert y.shape == (1, 1, 12, 16)
        assert y[0, 0, 0, 0] == pytest.approx(x[0, 0, 0, 0], abs=1e-12)
        assert y[0, 0, -1, -1] == pytest.approx(x[0, 0, -1, -1], abs=1e-12)

    def test_softmax_rows_sum_to_one(self, rng):
        y = F.softmax_rows(Tensor(rng.uniform(-1000, 1000, (3, 7, 9)))).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_group_norm_statistics(self, rng):
        channels = 32
        x = Tensor(rng.normal(3.0, 10.0, (2, channels, 4, 4)))
        params = GroupNormParams(Tensor(np.ones(channels)), Tensor(np.zeros(channels)))
        y = F.group_normalize(x, params).data.reshape(2, group_count(channels), -1)
        assert np.max(np.abs(y.mean(axis=-1))) < 1e-6
        assert np.max(np.abs(y.var(axis=-1) - 1.0)) < 1e-5

    def test_bilinear_doubles_a_ramp(self):
        x = Tensor(np.array([[[[0.0, 2.0], [0.0, 2.0]]]]))
        y = F.bilinear_upsample(x, 2).data
        np.testing.assert_allclose(y[0, 0], np.tile([0.0, 2 / 3, 4 / 3, 2.0], (4, 1)), atol=1e-12)

    def test_softmax_rows_known_values(self):
        y = F.softmax_rows(Tensor(np.array([[[0.0, np.log(3.0)]]]))).data
        np.testing.assert_allclose(y[0, 0], [0.25, 0.75], atol=1e-12)

    def test_group_norm_known_values(self):
        params = GroupNormParams(Tensor(np.ones(1)), Tensor(np.zeros(1)))
        y = F.group_normalize(Tensor(np.array([[[[1.0, 3.0]]]])), params).data
        np.testing.assert_allclose(y[0, 0, 0], [-1.0, 1.0], atol=1e-5)

    def test_group_norm_of_constant_input_is_zero(self):
        params = GroupNormParams(Tensor(np.ones(4)), Tensor(np.zeros(4)))
        y = F.group_normalize(Tensor(np.full((2, 4, 3, 3), 7.5)), params).data
        np.testing.assert_array_equal(y, np.zeros((2, 4, 3, 3)))

    def test_group_norm_with_zero_gamma_returns_beta(self, rng):
        beta = np.array([0.5, -1.0, 2.0, 0.0])
        params = GroupNormParams(Tensor(np.zeros(4)), Tensor(beta))
        y = F.group_normalize(Tensor(rng.standard_normal((1, 4, 3, 3))), params).data
        np.testing.assert_allclose(y, np.broadcast_to(beta[None, :, None, None], y.shape), atol=1e-12)

    def test_relu_sum_gradient(self):
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        F.reduce_sum(F.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_sum_of_squares_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        F.reduce_sum(F.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_group_count_rules(self):
        assert group_count(8) == 8
        assert group_count(16) == 16
        assert group_count(64) == 4
        with pytest.raises(ConfigurationError):
            group_count(24)

    def test_channel_shuffle_four_by_two(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 2, 2)))
        np.testing.assert_array_equal(F.channel_shuffle(x, 2).data, x.data[:, [0, 3, 2, 1]])

    @pytest.mark.parametrize('channels', [4, 8, 128])
    def test_channel_shuffle_twice_with_two_groups_restores_order(self, rng, channels):
        x = Tensor(rng.standard_normal((2, channels, 2, 2)))
        once = F.channel_shuffle(x, 2)
        np.testing.assert_array_equal(F.channel_shuffle(once, 2).data, x.data)
        # each half of the result draws on both halves of the input
        perm = F.shuffle_permutation(channels, 2)
        half = channels // 2
        for part in (perm[:half], perm[half:]):
            assert np.any(part < half) and np.any(part >= half)
        assert not np.array_equal(once.data, x.data)

    def test_channel_shuffle_order_matches_group_count(self, rng):
        x = Tensor(rng.standard_normal((1, 6, 2, 2)))
        y = x
        for _ in range(3):
            y = F.channel_shuffle(y, 3)
        np.testing.assert_array_equal(y.data, x.data)
        assert not np.array_equal(F.channel_shuffle(x, 3).data, x.data)

    def test_channel_shuffle_gradient_follows_the_permutation(self):
        x = Tensor(np.zeros((1, 8, 1, 1)), requires_grad=True)
        weights = np.arange(8.0).reshape(1, 8, 1, 1)
        weighted_sum(F.channel_shuffle(x, 2), weights).backward()
        perm = F.shuffle_permutation(8, 2)
        np.testing.assert_array_equal(x.grad[0, perm, 0, 0], np.arange(8.0))

    def test_channel_shuffle_needs_divisible_channels(self, rng):
        with pytest.raises(ConfigurationError):
            F.channel_shuffle(Tensor(rng.standard_normal((1, 5, 2, 2))), 2)
