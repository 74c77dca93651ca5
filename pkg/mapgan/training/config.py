import dataclasses

from typing import Any, Dict, Optional, Tuple  # noqa F401

from mapgan.data.paired import DEFAULT_RESIZE
from mapgan.networks.adam import DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS, DEFAULT_LR
from mapgan.networks.gan import (
    DEFAULT_DISCRIMINATOR_CHANNELS,
    DEFAULT_DROPOUT_BLOCKS,
    DEFAULT_GENERATOR_CHANNELS,
    GanLossVariant,
    is_power_of_two,
)
from mapgan.networks.nn import ENCODER_SLOPE


@dataclasses.dataclass
class TrainConfig(object):
    """Every knob of a training run; the CLI takes its defaults from here."""

    data_root: str = "."
    output_dir: str = "out"
    epochs: int = 1
    batch_size: int = 10
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    adam_eps: float = DEFAULT_EPS
    gan_loss: GanLossVariant = GanLossVariant.NON_SATURATING
    adv_weight: float = 1.0
    l1_weight: float = 0.0
    d_steps: int = 1
    seed: int = 0
    checkpoint_every: int = 1
    sample_every: int = 100
    resize_to: int = DEFAULT_RESIZE
    swap_halves: bool = False
    generator_channels: Tuple[int, ...] = DEFAULT_GENERATOR_CHANNELS
    generator_dropout_blocks: int = DEFAULT_DROPOUT_BLOCKS
    discriminator_channels: Tuple[int, ...] = DEFAULT_DISCRIMINATOR_CHANNELS
    leaky_slope: float = ENCODER_SLOPE
    decoder_slope: float = 0.0
    init_std: float = 0.02
    workers: int = 1
    max_steps: Optional[int] = None
    val_every: int = 0
    resume: Optional[str] = None

    def validate(self):
        # type: () -> TrainConfig
        counts = ("epochs", "batch_size", "checkpoint_every", "sample_every", "d_steps", "workers")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError("{} must be >= 1, got {}".format(name, getattr(self, name)))
        if self.lr <= 0:
            raise ValueError("lr must be positive, got {}".format(self.lr))
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError("{} must be in [0, 1)".format(name))
        if self.l1_weight < 0 or self.adv_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.l1_weight == 0 and self.adv_weight == 0:
            raise ValueError("at least one of adv_weight and l1_weight must be positive")
        if not isinstance(self.gan_loss, GanLossVariant):
            raise TypeError("gan_loss must be a GanLossVariant")
        for name in ("leaky_slope", "decoder_slope"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError("{} must be in [0, 1)".format(name))
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.val_every < 0:
            raise ValueError("val_every must be >= 0")
        min_size = 2 ** len(self.generator_channels)
        if not is_power_of_two(self.resize_to) or self.resize_to < min_size:
            raise ValueError(
                "resize_to must be a power of two >= {} for {} generator blocks, "
                "got {}".format(min_size, len(self.generator_channels), self.resize_to)
            )
        return self

    def to_dict(self):
        # type: () -> Dict[str, Any]
        snapshot = dataclasses.asdict(self)
        snapshot["gan_loss"] = self.gan_loss.value
        snapshot["generator_channels"] = list(self.generator_channels)
        snapshot["discriminator_channels"] = list(self.discriminator_channels)
        return snapshot

    @classmethod
    def from_dict(cls, snapshot):
        # type: (Dict[str, Any]) -> TrainConfig
        known = {f.name for f in dataclasses.fields(cls)}
        values = {k: v for k, v in snapshot.items() if k in known}
        if "gan_loss" in values:
            values["gan_loss"] = GanLossVariant(values["gan_loss"])
        for name in ("generator_channels", "discriminator_channels"):
            if name in values:
                values[name] = tuple(values[name])
        return cls(**values)


def default_values():
    # type: () -> Dict[str, Any]
    return {f.name: f.default for f in dataclasses.fields(TrainConfig)}
