"""Parameterized building blocks: conv layers, batch norm, encoder/decoder blocks.

Every down/up-sampling convolution uses a 4x4 kernel, stride 2 and padding 1,
which halves (or doubles) even spatial sizes exactly.
"""
import collections

import numpy as np

from typing import Iterator, List, Optional, Tuple  # noqa F401

from mapgan.autodiff.ops import (
    Mode,
    RunningStats,
    batch_norm,
    concat_channels,
    conv2d,
    conv_transpose2d,
    dropout,
    leaky_relu,
    tanh,
)
from mapgan.autodiff.tensor import DTYPE, ShapeError, Tensor

KERNEL_SIZE = 4
ENCODER_SLOPE = 0.2


class InitScheme(object):
    """Normal(mean, std) initialization; the same rng seed gives the same weights."""

    def __init__(self, mean=0.0, std=0.02, seed=0, kind="normal"):
        if kind != "normal":
            raise ValueError("unsupported init kind {!r}".format(kind))
        if std < 0:
            raise ValueError("init std must be >= 0")
        self.kind = kind
        self.mean = mean
        self.std = std
        self.seed = seed

    def __repr__(self):
        return "InitScheme(kind={kind!r}, mean={mean!r}, std={std!r}, seed={seed!r})".format(
            **self.__dict__
        )

    def rng(self):
        # type: () -> np.random.Generator
        return np.random.default_rng(self.seed)


def init_weights(shape, scheme, rng):
    # type: (Tuple[int, ...], InitScheme, np.random.Generator) -> Tensor
    """Sample i.i.d. normal(scheme.mean, scheme.std) into a trainable tensor."""
    if len(shape) == 0:
        raise ShapeError("init_weights needs a non-empty shape")
    values = rng.normal(scheme.mean, scheme.std, size=shape)
    return Tensor(values.astype(DTYPE), requires_grad=True)


class Module(object):
    """Ordered container of parameters, running statistics and sub-modules.

    Names join the registration path with dots, e.g. `enc3.conv.kernel`.
    """

    def __init__(self):
        self._parameters = collections.OrderedDict()
        self._modules = collections.OrderedDict()
        self._stats = collections.OrderedDict()

    def add_parameter(self, name, tensor):
        # type: (str, Tensor) -> Tensor
        self._parameters[name] = tensor
        return tensor

    def add_module(self, name, module):
        self._modules[name] = module
        return module

    def add_running_stats(self, name, stats):
        # type: (str, RunningStats) -> RunningStats
        self._stats[name] = stats
        return stats

    def named_parameters(self, prefix=""):
        # type: (str) -> Iterator[Tuple[str, Tensor]]
        for name, tensor in self._parameters.items():
            yield prefix + name, tensor
        for name, module in self._modules.items():
            for item in module.named_parameters(prefix + name + "."):
                yield item

    def named_buffers(self, prefix=""):
        # type: (str) -> Iterator[Tuple[str, np.ndarray]]
        """Non-trainable arrays (running statistics), updated in place."""
        for name, stats in self._stats.items():
            yield prefix + name + "_mean", stats.mean
            yield prefix + name + "_var", stats.var
        for name, module in self._modules.items():
            for item in module.named_buffers(prefix + name + "."):
                yield item

    def parameters(self):
        # type: () -> List[Tensor]
        return [tensor for _, tensor in self.named_parameters()]

    def parameter_count(self):
        # type: () -> int
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for tensor in self.parameters():
            tensor.zero_grad()


class ConvLayer(Module):
    def __init__(
        self,
        in_channels,
        out_channels,
        scheme,
        rng,
        stride=2,
        padding=1,
        bias=False,
        transposed=False,
    ):
        super(ConvLayer, self).__init__()
        self.stride = stride
        self.padding = padding
        self.transposed = transposed

        if transposed:
            shape = (in_channels, out_channels, KERNEL_SIZE, KERNEL_SIZE)
        else:
            shape = (out_channels, in_channels, KERNEL_SIZE, KERNEL_SIZE)
        self.kernel = self.add_parameter("kernel", init_weights(shape, scheme, rng))
        self.bias = None  # type: Optional[Tensor]
        if bias:
            self.bias = self.add_parameter(
                "bias",
                Tensor(np.zeros(out_channels, dtype=DTYPE), requires_grad=True),
            )

    def __call__(self, x):
        # type: (Tensor) -> Tensor
        op = conv_transpose2d if self.transposed else conv2d
        return op(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)


class BatchNormLayer(Module):
    def __init__(self, channels, scheme, rng):
        super(BatchNormLayer, self).__init__()
        gamma_scheme = InitScheme(mean=1.0, std=scheme.std, seed=scheme.seed)
        self.gamma = self.add_parameter(
            "gamma", init_weights((channels,), gamma_scheme, rng)
        )
        self.beta = self.add_parameter(
            "beta", Tensor(np.zeros(channels, dtype=DTYPE), requires_grad=True)
        )
        self.stats = self.add_running_stats("running", RunningStats(channels))

    def __call__(self, x, mode):
        # type: (Tensor, Mode) -> Tensor
        return batch_norm(x, self.gamma, self.beta, self.stats, mode=mode)


class EncoderBlock(Module):
    """conv(4, stride, 1) -> optional batch norm -> leaky relu."""

    def __init__(
        self,
        in_channels,
        out_channels,
        scheme,
        rng,
        use_batchnorm=True,
        slope=ENCODER_SLOPE,
        stride=2,
    ):
        super(EncoderBlock, self).__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.use_batchnorm = use_batchnorm
        self.slope = slope
        self.stride = stride
        # batch norm's beta takes the place of a conv bias
        self.conv = self.add_module(
            "conv",
            ConvLayer(
                in_channels, out_channels, scheme, rng, stride=stride, bias=not use_batchnorm
            ),
        )
        self.bn = None  # type: Optional[BatchNormLayer]
        if use_batchnorm:
            self.bn = self.add_module("bn", BatchNormLayer(out_channels, scheme, rng))

    def __call__(self, x, mode=Mode.TRAIN):
        return encoder_forward(self, x, mode)


class DecoderBlock(Module):
    """conv_transpose(4, 2, 1) -> batch norm -> dropout -> activation.

    The output block of a generator skips batch norm, keeps its bias and ends
    in tanh instead of a (leaky) rectifier.
    """

    def __init__(
        self,
        in_channels,
        out_channels,
        scheme,
        rng,
        dropout_rate=0.0,
        slope=0.0,
        output_block=False,
    ):
        super(DecoderBlock, self).__init__()
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.dropout_rate = dropout_rate
        self.slope = slope
        self.output_block = output_block

        self.convt = self.add_module(
            "convt",
            ConvLayer(
                in_channels,
                out_channels,
                scheme,
                rng,
                bias=output_block,
                transposed=True,
            ),
        )
        self.bn = None  # type: Optional[BatchNormLayer]
        if not output_block:
            self.bn = self.add_module("bn", BatchNormLayer(out_channels, scheme, rng))

    def __call__(self, x, skip=None, mode=Mode.TRAIN, rng=None, dropout_mode=None):
        return decoder_forward(self, x, skip, mode, rng, dropout_mode)


def encoder_forward(block, x, mode=Mode.TRAIN):
    # type: (EncoderBlock, Tensor, Mode) -> Tensor
    if len(x.shape) != 4 or x.shape[1] != block.in_channels:
        raise ShapeError(
            "encoder block expects [B,{},H,W], got {}".format(block.in_channels, x.shape)
        )
    height, width = x.shape[2:]
    if block.stride == 2 and (height % 2 or width % 2 or height < 2 or width < 2):
        raise ShapeError(
            "encoder block needs even spatial dims >= 2, got {}x{}".format(height, width)
        )

    out = block.conv(x)
    if block.bn is not None:
        out = block.bn(out, mode)
    return leaky_relu(out, block.slope)


def decoder_forward(block, x, skip=None, mode=Mode.TRAIN, rng=None, dropout_mode=None):
    # type: (DecoderBlock, Tensor, Optional[Tensor], Mode, Optional[np.random.Generator], Optional[Mode]) -> Tensor
    """Upsample `x` and append `skip` along channels when given.

    `dropout_mode` overrides `mode` for the dropout stage only, which keeps
    dropout active while batch norm runs on its running statistics.
    """
    if len(x.shape) != 4 or x.shape[1] != block.in_channels:
        raise ShapeError(
            "decoder block expects [B,{},H,W], got {}".format(block.in_channels, x.shape)
        )
    batch, _, height, width = x.shape
    if skip is not None and (
        skip.shape[0] != batch or skip.shape[2:] != (2 * height, 2 * width)
    ):
        raise ShapeError(
            "skip {} does not match upsampled [{}, *, {}, {}]".format(
                skip.shape, batch, 2 * height, 2 * width
            )
        )

    out = block.convt(x)
    if block.output_block:
        out = tanh(out)
    else:
        out = block.bn(out, mode)
        out = dropout(out, block.dropout_rate, dropout_mode or mode, rng)
        out = leaky_relu(out, block.slope)

    if skip is not None:
        out = concat_channels(out, skip)
    return out
