import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from training_app.exceptions import ArgumentError, DimensionError, StateError
from training_app.layers import (
    BatchNormLayer,
    ConvLayer,
    DenseLayer,
    DropoutLayer,
    MaxPoolLayer,
    conv_output_shape,
    relu,
    relu_deriv,
)
from training_app.randgen import uniform_tensor


def naive_conv(x, kernels, b, stride, padding):
    batch, _, height, width = x.shape
    out_ch, in_ch, kh, kw = kernels.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    z = np.zeros((batch, out_ch, out_h, out_w))
    for n in range(batch):
        for o in range(out_ch):
            for i in range(out_h):
                for j in range(out_w):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    z[n, o, i, j] = (patch * kernels[o]).sum() + b[o]
    return z


class ActivationTests(SimpleTestCase):
    def test_relu_and_heaviside(self):
        z = np.array([-1.0, 0.0, 2.0])
        assert_array_equal(relu(z), [0.0, 0.0, 2.0])
        assert_array_equal(relu_deriv(z), [0.0, 0.0, 1.0])


class DenseLayerTests(SimpleTestCase):
    def setUp(self):
        self.layer = DenseLayer(np.array([[1.0, 2.0, 0.0], [-1.0, 0.0, 1.0]]), np.array([0.5, -0.5]))

    def test_forward(self):
        y = self.layer.forward(np.array([[1.0, 1.0, 1.0]]))
        assert_array_equal(self.layer.z, [[3.5, -0.5]])
        assert_array_equal(y, [[3.5, 0.0]])

    def test_backward_sums_over_batch(self):
        x = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]])
        self.layer.forward(x)
        e = np.array([[1.0, 2.0], [3.0, -1.0]])
        e_x, grads = self.layer.backward(e)
        assert_array_equal(grads['W'], e.T @ x)
        assert_array_equal(grads['b'], [4.0, 1.0])
        assert_array_equal(e_x, e @ self.layer.W)

    def test_backward_weights_replace_w(self):
        x = np.ones((1, 3))
        self.layer.forward(x)
        B = np.arange(6.0).reshape(2, 3)
        e_x, _ = self.layer.backward(np.array([[1.0, 1.0]]), backward_weights=B)
        assert_array_equal(e_x, [[3.0, 5.0, 7.0]])

    def test_no_propagation(self):
        self.layer.forward(np.ones((1, 3)))
        e_x, _ = self.layer.backward(np.ones((1, 2)), propagate=False)
        self.assertIsNone(e_x)

    def test_backward_before_forward(self):
        with self.assertRaises(StateError):
            self.layer.backward(np.ones((1, 2)))

    def test_width_mismatch(self):
        with self.assertRaises(DimensionError):
            self.layer.forward(np.ones((1, 4)))

    def test_glorot_bias_is_zero(self):
        layer = DenseLayer.glorot(1, 20, 10)
        self.assertEqual(layer.W.shape, (10, 20))
        assert_array_equal(layer.b, np.zeros(10))
        self.assertEqual(layer.forward_macs(1), 200)


class ConvLayerTests(SimpleTestCase):
    def test_forward_matches_naive_loops(self):
        x = uniform_tensor(1, (2, 3, 6, 5), dtype=np.float64)
        kernels = uniform_tensor(2, (4, 3, 3, 2), dtype=np.float64)
        b = uniform_tensor(3, (4,), dtype=np.float64)
        for stride, padding in ((1, 0), (2, 1)):
            layer = ConvLayer(kernels, b, stride=stride, padding=padding)
            layer.forward(x)
            assert_allclose(layer.z, naive_conv(x, kernels, b, stride, padding), rtol=1e-12, atol=1e-12)

    def test_output_shape(self):
        self.assertEqual(conv_output_shape((3, 32, 32), 96, 5, 1, 2), (96, 32, 32))
        self.assertEqual(conv_output_shape((1, 28, 28), 8, 3, 2, 0), (8, 13, 13))

    def test_kernel_larger_than_padded_input(self):
        with self.assertRaises(DimensionError):
            conv_output_shape((1, 2, 2), 4, 5, 1, 1)

    def test_channel_mismatch(self):
        layer = ConvLayer.glorot(1, 3, 4, 3)
        with self.assertRaises(DimensionError):
            layer.forward(np.ones((1, 2, 5, 5), dtype=np.float32))

    def test_backward_before_forward(self):
        with self.assertRaises(StateError):
            ConvLayer.glorot(1, 3, 4, 3).backward(np.ones((1, 4, 3, 3)))

    def test_input_error_is_adjoint_of_forward(self):
        # <conv(x), e> == <x, conv^T(e)> for the linear part
        x = uniform_tensor(4, (2, 2, 5, 5), dtype=np.float64)
        kernels = uniform_tensor(5, (3, 2, 3, 3), dtype=np.float64)
        layer = ConvLayer(kernels, np.zeros(3), stride=2, padding=1)
        layer.forward(x)
        e = uniform_tensor(6, layer.z.shape, dtype=np.float64)
        e_x, _ = layer.backward(e)
        self.assertAlmostEqual(float((layer.z * e).sum()), float((x * e_x).sum()), places=10)


class MaxPoolTests(SimpleTestCase):
    def test_forward_and_routing(self):
        x = np.array([[[[1.0, 2.0, 5.0, 0.0],
                        [3.0, 4.0, 1.0, 1.0],
                        [0.0, 0.0, 2.0, 2.0],
                        [9.0, 0.0, 2.0, 7.0]]]])
        pool = MaxPoolLayer(2, 2)
        assert_array_equal(pool.forward(x), [[[[4.0, 5.0], [9.0, 7.0]]]])
        e_in = pool.backward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        expected = np.zeros((1, 1, 4, 4))
        expected[0, 0, 1, 1] = 1.0
        expected[0, 0, 0, 2] = 2.0
        expected[0, 0, 3, 0] = 3.0
        expected[0, 0, 3, 3] = 4.0
        assert_array_equal(e_in, expected)

    def test_ties_go_to_lowest_index(self):
        pool = MaxPoolLayer(2, 2)
        pool.forward(np.ones((1, 1, 2, 2)))
        assert_array_equal(pool.backward(np.ones((1, 1, 1, 1))), [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_overlapping_windows_accumulate(self):
        pool = MaxPoolLayer((1, 2), 1)
        assert_array_equal(pool.forward(np.array([[[[1.0, 5.0, 0.0]]]])), [[[[5.0, 5.0]]]])
        assert_array_equal(pool.backward(np.array([[[[2.0, 3.0]]]])), [[[[0.0, 5.0, 0.0]]]])

    def test_backward_before_forward(self):
        with self.assertRaises(StateError):
            MaxPoolLayer(2, 2).backward(np.ones((1, 1, 1, 1)))


class BatchNormTests(SimpleTestCase):
    def test_training_output_is_normalized(self):
        x = uniform_tensor(1, (50, 4), 2.0, 6.0, dtype=np.float64)
        bn = BatchNormLayer(4, dtype=np.float64)
        y = bn.forward(x, training=True)
        assert_allclose(y.mean(axis=0), np.zeros(4), atol=1e-12)
        assert_allclose(y.var(axis=0), np.ones(4), rtol=1e-3)

    def test_running_statistics(self):
        x = np.array([[1.0, 10.0], [3.0, 14.0]])
        bn = BatchNormLayer(2, dtype=np.float64)
        bn.forward(x, training=True)
        assert_allclose(bn.running_mean, [0.2, 1.2])
        # unbiased batch variances are 2 and 8
        assert_allclose(bn.running_var, [0.9 + 0.2, 0.9 + 0.8])

    def test_inference_uses_running_statistics(self):
        bn = BatchNormLayer(2, dtype=np.float64)
        bn.running_mean[...] = [1.0, 2.0]
        bn.running_var[...] = [4.0, 1.0]
        y = bn.forward(np.array([[3.0, 2.0]]), training=False)
        assert_allclose(y, [[2.0 / np.sqrt(4.0 + 1e-5), 0.0]])

    def test_conv_maps_share_statistics(self):
        x = uniform_tensor(2, (4, 3, 5, 5), dtype=np.float64)
        y = BatchNormLayer(3, dtype=np.float64).forward(x, training=True)
        assert_allclose(y.mean(axis=(0, 2, 3)), np.zeros(3), atol=1e-12)

    def test_batch_of_one_rejected_in_training(self):
        with self.assertRaises(ArgumentError):
            BatchNormLayer(2).forward(np.ones((1, 2), dtype=np.float32), training=True)

    def test_single_feature_map_is_enough_for_conv(self):
        x = uniform_tensor(3, (1, 2, 4, 4), dtype=np.float64)
        bn = BatchNormLayer(2, dtype=np.float64)
        y = bn.forward(x, training=True)
        assert_allclose(y.mean(axis=(0, 2, 3)), np.zeros(2), atol=1e-12)
        self.assertTrue(np.all(np.isfinite(bn.running_var)))
        with self.assertRaises(ArgumentError):
            bn.forward(np.ones((1, 2, 1, 1)), training=True)

    def test_scale_only_variant(self):
        self.assertEqual(list(BatchNormLayer(3, shift=False).params()), ['gamma'])

    def test_backward_before_forward(self):
        with self.assertRaises(StateError):
            BatchNormLayer(2).backward(np.ones((2, 2)))


class DropoutTests(SimpleTestCase):
    def test_inference_is_identity(self):
        x = np.ones((3, 4))
        self.assertIs(DropoutLayer(0.5, 1).forward(x, training=False), x)

    def test_zero_probability_is_identity(self):
        x = uniform_tensor(1, (3, 4))
        assert_array_equal(DropoutLayer(0.0, 1).forward(x, training=True), x)

    def test_mask_scaling_and_rate(self):
        layer = DropoutLayer(0.5, 3)
        x = np.ones((100, 100), dtype=np.float32)
        y = layer.forward(x, training=True)
        self.assertEqual(set(np.unique(y).tolist()), {0.0, 2.0})
        self.assertTrue(0.45 < float((y == 0).mean()) < 0.55)
        assert_array_equal(layer.backward(x), y)

    def test_masks_reproducible_and_advancing(self):
        x = np.ones((10, 10), dtype=np.float32)
        a, b = DropoutLayer(0.3, 8), DropoutLayer(0.3, 8)
        first = a.forward(x, training=True)
        assert_array_equal(first, b.forward(x, training=True))
        self.assertFalse(np.array_equal(first, a.forward(x, training=True)))

    def test_probability_range(self):
        for p in (-0.1, 1.0):
            with self.assertRaises(ArgumentError):
                DropoutLayer(p, 1)

    def test_backward_needs_training_forward(self):
        layer = DropoutLayer(0.5, 1)
        layer.forward(np.ones(3), training=False)
        with self.assertRaises(StateError):
            layer.backward(np.ones(3))
