from unittest import TestCase

import numpy as np

from mapgan.autodiff import ops
from mapgan.autodiff.ops import Mode
from mapgan.autodiff.tensor import ShapeError, Tensor
from mapgan.networks.nn import (
    DecoderBlock,
    EncoderBlock,
    InitScheme,
    decoder_forward,
    encoder_forward,
    init_weights,
)


class TestInitWeights(TestCase):
    def test_init_weights__same_seed__identical(self):
        scheme = InitScheme(seed=5)
        a = init_weights((8, 3, 4, 4), scheme, scheme.rng())
        b = init_weights((8, 3, 4, 4), scheme, scheme.rng())
        np.testing.assert_array_equal(a.data, b.data)
        self.assertTrue(a.requires_grad)

    def test_init_weights__large_sample__matches_moments(self):
        scheme = InitScheme(std=0.02, seed=1)
        w = init_weights((200, 200), scheme, scheme.rng()).data
        self.assertAlmostEqual(0.0, float(w.mean()), delta=5e-4)
        self.assertAlmostEqual(0.02, float(w.std()), delta=5e-4)

    def test_init_scheme__unknown_kind__raises(self):
        self.assertRaises(ValueError, InitScheme, kind="uniform")


class TestEncoderBlock(TestCase):
    def test_encoder_block__even_input__halves_spatial(self):
        scheme = InitScheme()
        block = EncoderBlock(3, 8, scheme, scheme.rng())
        out = block(Tensor(np.ones((2, 3, 16, 16))), Mode.TRAIN)
        self.assertEqual((2, 8, 8, 8), out.shape)

    def test_encoder_block__odd_input__raises(self):
        scheme = InitScheme()
        block = EncoderBlock(3, 8, scheme, scheme.rng())
        self.assertRaises(ShapeError, block, Tensor(np.ones((1, 3, 15, 15))))

    def test_encoder_block__channel_mismatch__raises(self):
        scheme = InitScheme()
        block = EncoderBlock(3, 8, scheme, scheme.rng())
        self.assertRaises(ShapeError, block, Tensor(np.ones((1, 4, 16, 16))))

    def test_encoder_block__batchnorm__conv_has_no_bias(self):
        scheme = InitScheme()
        names = [n for n, _ in EncoderBlock(3, 8, scheme, scheme.rng()).named_parameters()]
        self.assertEqual(["conv.kernel", "bn.gamma", "bn.beta"], names)

    def test_encoder_block__without_batchnorm__conv_has_bias(self):
        scheme = InitScheme()
        block = EncoderBlock(3, 8, scheme, scheme.rng(), use_batchnorm=False)
        names = [n for n, _ in block.named_parameters()]
        self.assertEqual(["conv.kernel", "conv.bias"], names)

    def test_named_buffers__batchnorm__running_stats_named(self):
        scheme = InitScheme()
        block = EncoderBlock(3, 8, scheme, scheme.rng())
        names = [n for n, _ in block.named_buffers("enc2.")]
        self.assertEqual(["enc2.bn.running_mean", "enc2.bn.running_var"], names)


class TestDecoderBlock(TestCase):
    def test_decoder_block__with_skip__doubles_spatial_and_concats(self):
        scheme = InitScheme()
        block = DecoderBlock(8, 4, scheme, scheme.rng())
        out = block(Tensor(np.ones((2, 8, 2, 2))), Tensor(np.ones((2, 6, 4, 4))), Mode.TRAIN)
        self.assertEqual((2, 10, 4, 4), out.shape)

    def test_decoder_block__skip_mismatch__raises(self):
        scheme = InitScheme()
        block = DecoderBlock(8, 4, scheme, scheme.rng())
        self.assertRaises(
            ShapeError,
            block,
            Tensor(np.ones((1, 8, 2, 2))),
            Tensor(np.ones((1, 4, 8, 8))),
        )

    def test_decoder_block__output_block__tanh_range_and_bias(self):
        scheme = InitScheme(std=5.0)
        block = DecoderBlock(8, 3, scheme, scheme.rng(), output_block=True)
        out = block(Tensor(np.full((1, 8, 2, 2), 10.0)), mode=Mode.EVAL)
        self.assertTrue(np.all(np.abs(out.data) < 1.0))
        names = [n for n, _ in block.named_parameters()]
        self.assertEqual(["convt.kernel", "convt.bias"], names)

    def test_decoder_block__dropout_in_train_without_rng__raises(self):
        scheme = InitScheme()
        block = DecoderBlock(8, 4, scheme, scheme.rng(), dropout_rate=0.5)
        self.assertRaises(ValueError, block, Tensor(np.ones((1, 8, 2, 2))), None, Mode.TRAIN)

    def test_decoder_block__dropout_mode_override__bn_eval_dropout_train(self):
        scheme = InitScheme()
        block = DecoderBlock(8, 4, scheme, scheme.rng(), dropout_rate=0.5)
        x = Tensor(np.random.default_rng(0).standard_normal((1, 8, 2, 2)))
        a = block(x, None, Mode.EVAL, np.random.default_rng(1), Mode.TRAIN)
        b = block(x, None, Mode.EVAL, np.random.default_rng(2), Mode.TRAIN)
        plain = block(x, None, Mode.EVAL)
        self.assertFalse(np.array_equal(a.data, b.data))
        self.assertFalse(np.array_equal(a.data, plain.data))
        np.testing.assert_array_equal(block.bn.stats.mean, np.zeros(4))


class TestBlockComposition(TestCase):
    def _input(self, shape, seed=0):
        return Tensor(np.random.default_rng(seed).standard_normal(shape))

    def test_encoder_forward__equals_conv_bn_leaky_relu(self):
        scheme = InitScheme(std=0.3, seed=4)
        block = EncoderBlock(3, 6, scheme, scheme.rng())
        x = self._input((2, 3, 8, 8))

        out = encoder_forward(block, x, Mode.TRAIN)
        conv = ops.conv2d(x, block.conv.kernel, None, stride=2, padding=1)
        bn = ops.batch_norm(conv, block.bn.gamma, block.bn.beta, ops.RunningStats(6), Mode.TRAIN)
        np.testing.assert_array_equal(out.data, ops.leaky_relu(bn, 0.2).data)

    def test_encoder_forward__without_batchnorm__conv_bias_then_leaky_relu(self):
        scheme = InitScheme(std=0.3, seed=4)
        block = EncoderBlock(3, 6, scheme, scheme.rng(), use_batchnorm=False)
        block.conv.bias.data[...] = np.linspace(-0.5, 0.5, 6)
        x = self._input((1, 3, 8, 8))

        out = encoder_forward(block, x, Mode.EVAL)
        conv = ops.conv2d(x, block.conv.kernel, block.conv.bias, stride=2, padding=1)
        np.testing.assert_array_equal(out.data, ops.leaky_relu(conv, 0.2).data)

    def test_decoder_forward__equals_convt_bn_dropout_relu_concat(self):
        scheme = InitScheme(std=0.3, seed=6)
        block = DecoderBlock(8, 4, scheme, scheme.rng(), dropout_rate=0.5)
        x = self._input((2, 8, 2, 2))
        skip = self._input((2, 3, 4, 4), seed=1)

        out = decoder_forward(block, x, skip, Mode.TRAIN, np.random.default_rng(11))
        up = ops.conv_transpose2d(x, block.convt.kernel, None, stride=2, padding=1)
        bn = ops.batch_norm(up, block.bn.gamma, block.bn.beta, ops.RunningStats(4), Mode.TRAIN)
        dropped = ops.dropout(bn, 0.5, Mode.TRAIN, np.random.default_rng(11))
        expected = ops.concat_channels(ops.leaky_relu(dropped, 0.0), skip)
        np.testing.assert_array_equal(out.data, expected.data)

    def test_decoder_forward__output_block__convt_bias_then_tanh(self):
        scheme = InitScheme(std=0.3, seed=6)
        block = DecoderBlock(8, 3, scheme, scheme.rng(), output_block=True)
        block.convt.bias.data[...] = [0.1, -0.2, 0.3]
        x = self._input((1, 8, 4, 4))

        out = decoder_forward(block, x, mode=Mode.EVAL)
        up = ops.conv_transpose2d(x, block.convt.kernel, block.convt.bias, stride=2, padding=1)
        np.testing.assert_array_equal(out.data, ops.tanh(up).data)
