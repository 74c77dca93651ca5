from unittest import TestCase

import numpy as np

from mapgan.autodiff import ops
from mapgan.autodiff.ops import Mode
from mapgan.autodiff.tensor import ShapeError, Tensor


def _inner(a, b):
    return float(np.sum(a.astype(np.float64) * b.astype(np.float64)))


def _loop_conv2d(x, kernel, stride, padding):
    padded = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2))
    c_out, _, k, _ = kernel.shape
    out_h = (padded.shape[2] - k) // stride + 1
    out_w = (padded.shape[3] - k) // stride + 1
    out = np.zeros((x.shape[0], c_out, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            window = padded[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("bcpq,ocpq->bo", window, kernel)
    return out, padded


def _loop_conv2d_kernel_grad(padded, upstream, k, stride):
    _, c_out, out_h, out_w = upstream.shape
    grad = np.zeros((c_out, padded.shape[1], k, k))
    for i in range(out_h):
        for j in range(out_w):
            window = padded[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            grad += np.einsum("bo,bcpq->ocpq", upstream[:, :, i, j], window)
    return grad


def _loop_conv_transpose2d_kernel_grad(x, upstream, k, stride, padding):
    full = np.pad(upstream.astype(np.float64), ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2))
    _, c_in, h, w = x.shape
    grad = np.zeros((c_in, upstream.shape[1], k, k))
    for i in range(h):
        for j in range(w):
            window = full[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            grad += np.einsum("bc,bopq->copq", x[:, :, i, j].astype(np.float64), window)
    return grad


def _draws(seed, count):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        k = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2)) if k > 1 else 0
        out_size = int(rng.integers(1, 5))
        size = (out_size - 1) * stride + k - 2 * padding
        if size < 1:
            continue
        batch, c_in, c_out = (int(v) for v in rng.integers(1, 4, size=3))
        yield rng, k, stride, padding, size, out_size, batch, c_in, c_out


class TestConv2d(TestCase):
    def test_conv2d__ones_kernel__window_sums(self):
        x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
        kernel = Tensor(np.ones((1, 1, 2, 2)))
        out = ops.conv2d(x, kernel)
        np.testing.assert_array_equal(out.data[0, 0], [[8.0, 12.0], [20.0, 24.0]])

    def test_conv2d__stride_two_padding_one__halves_size(self):
        x = Tensor(np.zeros((2, 3, 256, 256)))
        kernel = Tensor(np.zeros((8, 3, 4, 4)))
        self.assertEqual((2, 8, 128, 128), ops.conv2d(x, kernel, stride=2, padding=1).shape)

    def test_conv2d__bias__added_per_channel(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        kernel = Tensor(np.ones((2, 1, 3, 3)))
        bias = Tensor(np.array([1.5, -2.0]))
        out = ops.conv2d(x, kernel, bias)
        np.testing.assert_array_equal(out.data[0, 0], np.full((2, 2), 1.5))
        np.testing.assert_array_equal(out.data[0, 1], np.full((2, 2), -2.0))

    def test_conv2d__channel_mismatch__raises(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        kernel = Tensor(np.zeros((1, 3, 3, 3)))
        self.assertRaises(ShapeError, ops.conv2d, x, kernel)

    def test_conv2d__input_smaller_than_kernel__raises(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        kernel = Tensor(np.zeros((1, 1, 4, 4)))
        self.assertRaises(ShapeError, ops.conv2d, x, kernel)

    def test_conv2d__gradients__match_manual_sums(self):
        x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3), requires_grad=True)
        kernel = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        ops.conv2d(x, kernel).sum().backward()
        # each kernel tap sees a 2x2 block of the input
        np.testing.assert_array_equal(kernel.grad[0, 0], [[8.0, 12.0], [20.0, 24.0]])
        np.testing.assert_array_equal(
            x.grad[0, 0], [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]
        )

    def test_conv2d__random_draws__forward_and_kernel_grad_match_loops(self):
        for rng, k, stride, padding, size, out_size, batch, c_in, c_out in _draws(21, 20):
            x = rng.standard_normal((batch, c_in, size, size)).astype(np.float32)
            kernel = Tensor(rng.standard_normal((c_out, c_in, k, k)), requires_grad=True)
            upstream = rng.standard_normal((batch, c_out, out_size, out_size)).astype(np.float32)

            out = ops.conv2d(Tensor(x), kernel, stride=stride, padding=padding)
            (out * Tensor(upstream)).sum().backward()

            expected, padded = _loop_conv2d(x, kernel.data.astype(np.float64), stride, padding)
            np.testing.assert_allclose(out.data, expected, rtol=1e-4, atol=1e-4)
            np.testing.assert_allclose(
                kernel.grad,
                _loop_conv2d_kernel_grad(padded, upstream, k, stride),
                rtol=1e-4,
                atol=1e-4,
            )


class TestConvTranspose2d(TestCase):
    def test_conv_transpose2d__single_pixel__stamps_kernel(self):
        x = Tensor(np.full((1, 1, 1, 1), 2.0))
        kernel = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
        out = ops.conv_transpose2d(x, kernel)
        np.testing.assert_array_equal(out.data[0, 0], 2.0 * kernel.data[0, 0])

    def test_conv_transpose2d__stride_two_padding_one__doubles_size(self):
        x = Tensor(np.zeros((2, 8, 128, 128)))
        kernel = Tensor(np.zeros((8, 3, 4, 4)))
        out = ops.conv_transpose2d(x, kernel, stride=2, padding=1)
        self.assertEqual((2, 3, 256, 256), out.shape)

    def test_conv_transpose2d__channel_mismatch__raises(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        kernel = Tensor(np.zeros((3, 1, 4, 4)))
        self.assertRaises(ShapeError, ops.conv_transpose2d, x, kernel)

    def test_adjoint_identity__random_draws__inner_products_agree(self):
        for rng, k, stride, padding, size, out_size, batch, c_in, c_out in _draws(1234, 20):
            x = rng.standard_normal((batch, c_in, size, size)).astype(np.float32)
            y = rng.standard_normal((batch, c_out, out_size, out_size)).astype(np.float32)
            kernel = Tensor(rng.standard_normal((c_out, c_in, k, k)))

            forward = ops.conv2d(Tensor(x), kernel, stride=stride, padding=padding).data
            adjoint = ops.conv_transpose2d(Tensor(y), kernel, stride=stride, padding=padding).data
            self.assertEqual(y.shape, forward.shape)
            self.assertEqual(x.shape, adjoint.shape)

            lhs, rhs = _inner(forward, y), _inner(x, adjoint)
            self.assertLessEqual(abs(lhs - rhs), 1e-4 * max(abs(lhs), abs(rhs), 1.0))

    def test_conv_transpose2d__input_grad__equals_conv2d(self):
        rng = np.random.default_rng(7)
        kernel = Tensor(rng.standard_normal((3, 2, 4, 4)))
        x = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
        upstream = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
        out = ops.conv_transpose2d(x, kernel, stride=2, padding=1)
        (out * Tensor(upstream)).sum().backward()
        expected = ops.conv2d(Tensor(upstream), kernel, stride=2, padding=1).data
        np.testing.assert_allclose(x.grad, expected, rtol=1e-4, atol=1e-5)

    def test_conv_transpose2d__random_draws__kernel_grad_matches_loops(self):
        for rng, k, stride, padding, size, out_size, batch, c_in, c_out in _draws(22, 20):
            # transposed direction: the small map is the input
            x = rng.standard_normal((batch, c_in, out_size, out_size)).astype(np.float32)
            kernel = Tensor(rng.standard_normal((c_in, c_out, k, k)), requires_grad=True)
            upstream = rng.standard_normal((batch, c_out, size, size)).astype(np.float32)

            out = ops.conv_transpose2d(Tensor(x), kernel, stride=stride, padding=padding)
            self.assertEqual(upstream.shape, out.shape)
            (out * Tensor(upstream)).sum().backward()

            np.testing.assert_allclose(
                kernel.grad,
                _loop_conv_transpose2d_kernel_grad(x, upstream, k, stride, padding),
                rtol=1e-4,
                atol=1e-4,
            )


class TestBatchNorm(TestCase):
    def _input(self):
        rng = np.random.default_rng(0)
        return Tensor(rng.normal(3.0, 2.0, size=(4, 2, 5, 5)))

    def test_batch_norm__train__standardizes_each_channel(self):
        x = self._input()
        stats = ops.RunningStats(2)
        out = ops.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, Mode.TRAIN)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), [0.0, 0.0], atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), [1.0, 1.0], atol=1e-3)

    def test_batch_norm__train__running_stats_follow_momentum(self):
        x = self._input()
        stats = ops.RunningStats(2)
        ops.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, Mode.TRAIN)
        data = x.data.astype(np.float64)
        batch_mean = data.mean(axis=(0, 2, 3))
        unbiased = data.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(stats.mean, 0.1 * batch_mean, rtol=1e-4)
        np.testing.assert_allclose(stats.var, 0.9 + 0.1 * unbiased, rtol=1e-4)

    def test_batch_norm__eval__uses_running_stats_without_updating(self):
        x = self._input()
        stats = ops.RunningStats(2)
        stats.mean[...] = [1.0, -1.0]
        stats.var[...] = [4.0, 0.25]
        gamma = Tensor(np.array([2.0, 1.0]))
        beta = Tensor(np.array([0.5, 0.0]))
        out = ops.batch_norm(x, gamma, beta, stats, Mode.EVAL)

        expected0 = (x.data[:, 0] - 1.0) / np.sqrt(4.0 + 1e-5) * 2.0 + 0.5
        expected1 = (x.data[:, 1] + 1.0) / np.sqrt(0.25 + 1e-5)
        np.testing.assert_allclose(out.data[:, 0], expected0, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(out.data[:, 1], expected1, rtol=1e-5, atol=1e-5)
        np.testing.assert_array_equal(stats.mean, [1.0, -1.0])
        np.testing.assert_array_equal(stats.var, [4.0, 0.25])

    def test_batch_norm__constant_channel__finite_output(self):
        x = Tensor(np.full((1, 1, 2, 2), 7.0))
        stats = ops.RunningStats(1)
        out = ops.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), stats, Mode.TRAIN)
        self.assertTrue(np.all(np.isfinite(out.data)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 1, 2, 2)))

    def test_batch_norm__gamma_zero__output_is_beta(self):
        x = self._input()
        beta = np.array([0.25, -1.5], dtype=np.float32)
        for mode in (Mode.TRAIN, Mode.EVAL):
            out = ops.batch_norm(
                x, Tensor(np.zeros(2)), Tensor(beta), ops.RunningStats(2), mode
            )
            np.testing.assert_array_equal(
                out.data, np.broadcast_to(beta.reshape(1, 2, 1, 1), x.shape)
            )

    def test_batch_norm__gamma_shape_mismatch__raises(self):
        x = Tensor(np.zeros((1, 2, 2, 2)))
        self.assertRaises(
            ShapeError,
            ops.batch_norm,
            x,
            Tensor(np.ones(3)),
            Tensor(np.zeros(2)),
            ops.RunningStats(2),
        )


class TestActivations(TestCase):
    def test_leaky_relu__values__scaled_negatives(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]))
        np.testing.assert_allclose(ops.leaky_relu(x, 0.2).data, [-0.4, 0.0, 3.0], rtol=1e-6)

    def test_leaky_relu__at_zero__gradient_is_slope(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        ops.leaky_relu(x, 0.2).sum().backward()
        np.testing.assert_allclose(x.grad, [0.2], rtol=1e-6)

    def test_leaky_relu__slope_out_of_range__raises(self):
        self.assertRaises(ValueError, ops.leaky_relu, Tensor(np.ones(1)), 1.0)

    def test_tanh__large_inputs__strictly_inside_unit_interval(self):
        out = ops.tanh(Tensor(np.array([-20.0, 0.0, 20.0]))).data
        self.assertLess(out[2], 1.0)
        self.assertGreater(out[0], -1.0)
        self.assertEqual(0.0, out[1])

    def test_sigmoid__extreme_inputs__strictly_inside_open_interval(self):
        out = ops.sigmoid(Tensor(np.array([-200.0, 0.0, 40.0]))).data
        self.assertGreater(out[0], 0.0)
        self.assertEqual(0.5, out[1])
        self.assertLess(out[2], 1.0)
        self.assertTrue(np.all(np.isfinite(out)))

    def test_sigmoid__gradient__y_times_one_minus_y(self):
        x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
        ops.sigmoid(x).sum().backward()
        y = 1.0 / (1.0 + np.exp(-np.array([0.0, 1.0])))
        np.testing.assert_allclose(x.grad, y * (1.0 - y), rtol=1e-5)


class TestDropout(TestCase):
    def test_dropout__eval__identity(self):
        x = Tensor(np.ones((2, 3)))
        self.assertIs(x, ops.dropout(x, 0.5, Mode.EVAL))

    def test_dropout__rate_zero__identity(self):
        x = Tensor(np.ones((2, 3)))
        self.assertIs(x, ops.dropout(x, 0.0, Mode.TRAIN, np.random.default_rng(0)))

    def test_dropout__rate_one__raises(self):
        self.assertRaises(ValueError, ops.dropout, Tensor(np.ones(2)), 1.0, Mode.TRAIN)

    def test_dropout__train_without_rng__raises(self):
        self.assertRaises(ValueError, ops.dropout, Tensor(np.ones(2)), 0.5, Mode.TRAIN)

    def test_dropout__train__inverted_scaling_preserves_mean(self):
        x = Tensor(np.ones((100, 100)))
        out = ops.dropout(x, 0.5, Mode.TRAIN, np.random.default_rng(3)).data
        self.assertTrue(set(np.unique(out)) <= {0.0, 2.0})
        self.assertAlmostEqual(0.5, float((out == 0.0).mean()), delta=0.03)
        self.assertAlmostEqual(1.0, float(out.mean()), delta=0.06)

    def test_dropout__same_seed__same_mask(self):
        x = Tensor(np.ones((4, 4)))
        a = ops.dropout(x, 0.5, Mode.TRAIN, np.random.default_rng(11)).data
        b = ops.dropout(x, 0.5, Mode.TRAIN, np.random.default_rng(11)).data
        np.testing.assert_array_equal(a, b)


class TestChannels(TestCase):
    def test_concat_channels__gradients__split_back(self):
        a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        b = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
        out = ops.concat_channels(a, b)
        self.assertEqual((1, 5, 2, 2), out.shape)
        weights = np.arange(5, dtype=np.float32).reshape(1, 5, 1, 1) * np.ones((1, 5, 2, 2))
        (out * Tensor(weights)).sum().backward()
        np.testing.assert_array_equal(a.grad, weights[:, :2])
        np.testing.assert_array_equal(b.grad, weights[:, 2:])

    def test_concat_channels__spatial_mismatch__raises(self):
        a = Tensor(np.ones((1, 2, 2, 2)))
        b = Tensor(np.ones((1, 2, 4, 4)))
        self.assertRaises(ShapeError, ops.concat_channels, a, b)

    def test_slice_channels__gradient__zero_outside_slice(self):
        x = Tensor(np.ones((1, 4, 2, 2)), requires_grad=True)
        ops.slice_channels(x, 1, 3).sum().backward()
        np.testing.assert_array_equal(x.grad[0, :, 0, 0], [0.0, 1.0, 1.0, 0.0])

    def test_slice_channels__empty_range__raises(self):
        self.assertRaises(ShapeError, ops.slice_channels, Tensor(np.ones((1, 4, 2, 2))), 2, 2)


class TestOutputSizes(TestCase):
    def test_conv_output_size__pix2pix_layers__expected(self):
        self.assertEqual(128, ops.conv_output_size(256, 4, 2, 1))
        self.assertEqual(31, ops.conv_output_size(32, 4, 1, 1))
        self.assertEqual(256, ops.conv_transpose_output_size(128, 4, 2, 1))
