"""U-Net generator, patch discriminator and the adversarial losses.

The generator maps a satellite tile to a map tile of the same size. Encoder
block i feeds decoder block n - i through a channel concatenation. The
discriminator scores (satellite, map) pairs patch by patch.
"""
import enum

import numpy as np

from typing import List, Optional, Sequence  # noqa F401

from mapgan.autodiff.ops import Mode, concat_channels, conv_output_size, sigmoid
from mapgan.autodiff.tensor import ShapeError, Tensor
from mapgan.networks.nn import (
    ENCODER_SLOPE,
    KERNEL_SIZE,
    ConvLayer,
    DecoderBlock,
    EncoderBlock,
    InitScheme,
    Module,
)


DEFAULT_GENERATOR_CHANNELS = (64, 128, 256, 512, 512, 512, 512, 512)
DEFAULT_DISCRIMINATOR_CHANNELS = (64, 128, 256, 512)
DEFAULT_DROPOUT_BLOCKS = 3
DECODER_DROPOUT_RATE = 0.5
IMAGE_CHANNELS = 3

# scores are clamped into [SCORE_EPS, 1 - SCORE_EPS] before taking logs
SCORE_EPS = 1e-7


def is_power_of_two(value):
    # type: (int) -> bool
    return value >= 1 and value & (value - 1) == 0


class Generator(Module):
    """U-Net: len(channels) encoder blocks mirrored by as many decoder blocks.

    The first and innermost encoder blocks have no batch norm. Decoder blocks
    1..n-1 end in a rectifier with `decoder_slope` and the first
    `dropout_blocks` of them apply dropout 0.5; decoder block n is the tanh
    output block.
    """

    def __init__(
        self,
        channels=DEFAULT_GENERATOR_CHANNELS,
        dropout_blocks=DEFAULT_DROPOUT_BLOCKS,
        leaky_slope=ENCODER_SLOPE,
        decoder_slope=0.0,
        scheme=None,
        rng=None,
        image_channels=IMAGE_CHANNELS,
    ):
        # type: (Sequence[int], int, float, float, Optional[InitScheme], Optional[np.random.Generator], int) -> None
        super(Generator, self).__init__()
        if len(channels) < 2:
            raise ValueError("generator needs at least two encoder blocks")
        if not 0 <= dropout_blocks < len(channels):
            raise ValueError(
                "dropout_blocks must be in [0, {}), got {}".format(
                    len(channels), dropout_blocks
                )
            )
        scheme = scheme or InitScheme()
        rng = rng if rng is not None else scheme.rng()

        self.channels = tuple(channels)
        self.depth = len(channels)
        self.image_channels = image_channels

        self.encoders = []  # type: List[EncoderBlock]
        in_channels = image_channels
        for i, out_channels in enumerate(channels):
            block = EncoderBlock(
                in_channels,
                out_channels,
                scheme,
                rng,
                use_batchnorm=0 < i < self.depth - 1,
                slope=leaky_slope,
            )
            self.encoders.append(self.add_module("enc{}".format(i + 1), block))
            in_channels = out_channels

        n = self.depth
        self.decoders = []  # type: List[DecoderBlock]
        for j in range(1, n):
            block = DecoderBlock(
                channels[n - 1] if j == 1 else 2 * channels[n - j],
                channels[n - 1 - j],
                scheme,
                rng,
                dropout_rate=DECODER_DROPOUT_RATE if j <= dropout_blocks else 0.0,
                slope=decoder_slope,
            )
            self.decoders.append(self.add_module("dec{}".format(j), block))

        output = DecoderBlock(
            2 * channels[0], image_channels, scheme, rng, output_block=True
        )
        self.decoders.append(self.add_module("dec{}".format(n), output))

    @property
    def min_size(self):
        # type: () -> int
        return 2 ** self.depth

    def check_input(self, x):
        # type: (Tensor) -> None
        if len(x.shape) != 4 or x.shape[1] != self.image_channels:
            raise ShapeError(
                "generator expects [B,{},H,W], got {}".format(self.image_channels, x.shape)
            )
        for size in x.shape[2:]:
            if not is_power_of_two(size) or size < self.min_size:
                raise ShapeError(
                    "generator input must be a power of two >= {}, got {}x{}".format(
                        self.min_size, x.shape[2], x.shape[3]
                    )
                )

    def encode(self, x, mode=Mode.TRAIN):
        # type: (Tensor, Mode) -> List[Tensor]
        """Run the encoder; the last activation is the bottleneck."""
        self.check_input(x)
        activations = []
        for block in self.encoders:
            x = block(x, mode)
            activations.append(x)
        return activations

    def forward(self, satellite, mode=Mode.TRAIN, rng=None, dropout_mode=None):
        # type: (Tensor, Mode, Optional[np.random.Generator], Optional[Mode]) -> Tensor
        activations = self.encode(satellite, mode)
        n = self.depth
        out = activations[-1]
        for j, block in enumerate(self.decoders, start=1):
            skip = activations[n - 1 - j] if j < n else None
            out = block(out, skip, mode, rng, dropout_mode)
        return out

    __call__ = forward


def generator_forward(g, satellite, mode=Mode.TRAIN, rng=None):
    # type: (Generator, Tensor, Mode, Optional[np.random.Generator]) -> Tensor
    return g.forward(satellite, mode, rng)


class Discriminator(Module):
    """Patch classifier over channel-concatenated (satellite, map) pairs.

    Stages follow `channels`: stride 2 except the last (stride 1), batch norm
    on all but the first; a stride-1 single-channel conv and a sigmoid produce
    the patch score map (30x30 for 256x256 pairs).
    """

    def __init__(
        self,
        channels=DEFAULT_DISCRIMINATOR_CHANNELS,
        slope=ENCODER_SLOPE,
        scheme=None,
        rng=None,
        image_channels=IMAGE_CHANNELS,
    ):
        # type: (Sequence[int], float, Optional[InitScheme], Optional[np.random.Generator], int) -> None
        super(Discriminator, self).__init__()
        if len(channels) < 2:
            raise ValueError("discriminator needs at least two stages")
        scheme = scheme or InitScheme()
        rng = rng if rng is not None else scheme.rng()

        self.channels = tuple(channels)
        self.image_channels = image_channels
        self.stages = []  # type: List[EncoderBlock]
        in_channels = 2 * image_channels
        for i, out_channels in enumerate(channels):
            block = EncoderBlock(
                in_channels,
                out_channels,
                scheme,
                rng,
                use_batchnorm=i > 0,
                slope=slope,
                stride=1 if i == len(channels) - 1 else 2,
            )
            self.stages.append(self.add_module("stage{}".format(i + 1), block))
            in_channels = out_channels

        self.head = self.add_module(
            "head", ConvLayer(in_channels, 1, scheme, rng, stride=1, bias=True)
        )

    def patch_size(self, size):
        # type: (int) -> int
        for block in self.stages:
            size = conv_output_size(size, KERNEL_SIZE, block.stride, 1)
        return conv_output_size(size, KERNEL_SIZE, 1, 1)

    def forward(self, satellite, map_img, mode=Mode.TRAIN):
        # type: (Tensor, Tensor, Mode) -> Tensor
        if satellite.shape != map_img.shape:
            raise ShapeError(
                "pair halves differ: satellite {} vs map {}".format(
                    satellite.shape, map_img.shape
                )
            )
        if len(satellite.shape) != 4 or satellite.shape[1] != self.image_channels:
            raise ShapeError(
                "discriminator expects [B,{},H,W] halves, got {}".format(
                    self.image_channels, satellite.shape
                )
            )
        if min(self.patch_size(s) for s in satellite.shape[2:]) < 1:
            raise ShapeError(
                "pair {} is too small for {} discriminator stages".format(
                    satellite.shape, len(self.stages)
                )
            )

        x = concat_channels(satellite, map_img)
        for block in self.stages:
            x = block(x, mode)
        return sigmoid(self.head(x))

    __call__ = forward


def discriminator_forward(d, satellite, map_img, mode=Mode.TRAIN):
    # type: (Discriminator, Tensor, Tensor, Mode) -> Tensor
    return d.forward(satellite, map_img, mode)


def _clamped(scores):
    # type: (Tensor) -> Tensor
    return scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def discriminator_loss(real_scores, fake_scores):
    # type: (Tensor, Tensor) -> Tensor
    """-mean(log D(real)) - mean(log(1 - D(fake))), the minimized form of
    the discriminator's objective."""
    real_term = -_clamped(real_scores).log().mean()
    fake_term = -(1.0 - _clamped(fake_scores)).log().mean()
    return real_term + fake_term


@enum.unique
class GanLossVariant(enum.Enum):
    SATURATING = "saturating"
    NON_SATURATING = "non-saturating"

    def loss(self, fake_scores):
        # type: (Tensor) -> Tensor
        cls = type(self)
        losses = {
            cls.SATURATING: saturating_generator_loss,
            cls.NON_SATURATING: non_saturating_generator_loss,
        }
        return losses[self](fake_scores)


def saturating_generator_loss(fake_scores):
    # type: (Tensor) -> Tensor
    return (1.0 - _clamped(fake_scores)).log().mean()


def non_saturating_generator_loss(fake_scores):
    # type: (Tensor) -> Tensor
    return -_clamped(fake_scores).log().mean()


def generator_loss(fake_scores, variant=GanLossVariant.NON_SATURATING):
    # type: (Tensor, GanLossVariant) -> Tensor
    """Adversarial generator term.

    SATURATING is the literal mean(log(1 - D(G(z)))); NON_SATURATING is
    -mean(log D(G(z))), which keeps gradients alive while D wins early.
    """
    if not isinstance(variant, GanLossVariant):
        raise TypeError("variant must be a GanLossVariant, got {!r}".format(variant))
    return variant.loss(fake_scores)


def l1_loss(generated, target):
    # type: (Tensor, Tensor) -> Tensor
    if generated.shape != target.shape:
        raise ShapeError(
            "l1_loss shapes differ: {} vs {}".format(generated.shape, target.shape)
        )
    return (generated - target).abs().mean()
