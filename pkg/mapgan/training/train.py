"""Alternating adversarial training: one batch is one D update then one G update.

Randomness comes from three seeded streams derived from `TrainConfig.seed`:
weight init, dropout masks, and the per-epoch shuffle (a pure function of
seed and epoch, so a resumed run can skip straight to its next batch).
"""
import dataclasses
import json
import logging
import math
import os

import numpy as np

from typing import Any, Dict, List, Optional  # noqa F401

from mapgan.autodiff.ops import Mode
from mapgan.autodiff.tensor import Tensor, no_grad  # noqa F401
from mapgan.data.paired import (
    TRAIN_SPLIT,
    VAL_SPLIT,
    Batch,
    EmptyDatasetError,
    PairedDataset,
    make_batches,
)
from mapgan.networks.adam import AdamState, adam_step
from mapgan.networks.gan import (
    Discriminator,
    Generator,
    discriminator_loss,
    generator_loss,
    l1_loss,
)
from mapgan.networks.nn import InitScheme
from mapgan.training.checkpoint import (
    Checkpoint,
    CheckpointIntegrityError,
    load_checkpoint,
    save_checkpoint,
)
from mapgan.training.config import TrainConfig
from mapgan.training.samples import emit_sample_grid

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.log"
CHECKPOINT_DIR = "checkpoints"
SAMPLE_DIR = "samples"
SAMPLE_ROWS = 3


class NonFiniteLossError(ArithmeticError):
    def __init__(self, term, value, step):
        super(NonFiniteLossError, self).__init__(
            "non-finite {} ({}) at step {}".format(term, value, step)
        )
        self.term = term
        self.step = step


@dataclasses.dataclass
class StepMetrics(object):
    step: int
    d_loss: float
    g_loss_adv: float
    g_loss_l1: float
    d_real_mean: float
    d_fake_mean: float

    def to_dict(self):
        # type: () -> Dict[str, Any]
        return dataclasses.asdict(self)


def _finite(term, loss, step):
    # type: (str, Tensor, int) -> float
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(term, value, step)
    return value


def discriminator_phase(satellite, real, fake, d, d_opt, step=0):
    # type: (Tensor, Tensor, Tensor, Discriminator, AdamState, int) -> Dict[str, float]
    """Update D on (satellite, real) against (satellite, fake).

    `fake` must already be detached from the generator's graph.
    """
    d.zero_grad()
    real_scores = d(satellite, real, Mode.TRAIN)
    fake_scores = d(satellite, fake, Mode.TRAIN)
    loss = discriminator_loss(real_scores, fake_scores)
    d_loss = _finite("d_loss", loss, step)
    loss.backward()
    adam_step(d.named_parameters(), d_opt)
    return dict(
        d_loss=d_loss,
        d_real_mean=float(real_scores.data.mean()),
        d_fake_mean=float(fake_scores.data.mean()),
    )


def generator_phase(satellite, real, fake, d, g, g_opt, cfg, step=0):
    # type: (Tensor, Tensor, Tensor, Discriminator, Generator, AdamState, TrainConfig, int) -> Dict[str, float]
    """Update G on its weighted adversarial and L1 terms; D is scored, not stepped.

    A term whose weight is zero is neither computed nor reported (0.0).
    """
    g.zero_grad()
    d.zero_grad()
    total = None  # type: Optional[Tensor]
    reported = dict(g_loss_adv=0.0, g_loss_l1=0.0)

    if cfg.adv_weight > 0:
        adv = generator_loss(d(satellite, fake, Mode.TRAIN), cfg.gan_loss)
        reported["g_loss_adv"] = _finite("g_loss_adv", adv, step)
        total = adv * cfg.adv_weight
    if cfg.l1_weight > 0:
        l1 = l1_loss(fake, real)
        reported["g_loss_l1"] = _finite("g_loss_l1", l1, step)
        total = l1 * cfg.l1_weight if total is None else total + l1 * cfg.l1_weight

    total.backward()
    adam_step(g.named_parameters(), g_opt)
    d.zero_grad()
    return reported


def train_step(batch, g, d, g_opt, d_opt, cfg, rng, step=0):
    # type: (Batch, Generator, Discriminator, AdamState, AdamState, TrainConfig, np.random.Generator, int) -> StepMetrics
    """One D update (repeated `cfg.d_steps` times) followed by one G update.

    G runs once per step; the D phase sees its output detached, so that phase
    leaves every G gradient empty.

    :param step: index recorded in the returned metrics
    :raises NonFiniteLossError: a loss term is NaN or infinite
    """
    g.zero_grad()
    d.zero_grad()
    satellite, real = batch.satellite, batch.map_img

    fake = g(satellite, Mode.TRAIN, rng)
    for _ in range(cfg.d_steps):
        d_metrics = discriminator_phase(satellite, real, fake.detach(), d, d_opt, step)
    g_metrics = generator_phase(satellite, real, fake, d, g, g_opt, cfg, step)

    metrics = StepMetrics(step=step, **dict(d_metrics, **g_metrics))
    logger.debug("step %d: %s", step, metrics)
    return metrics


def evaluate(g, d, dataset, batch_size=10, workers=1):
    # type: (Generator, Discriminator, PairedDataset, int, int) -> Dict[str, float]
    """Eval-mode pass over `dataset`: mean L1 to the real map and mean scores.

    Running statistics are read, never updated.
    """
    totals = dict(l1=0.0, d_real_mean=0.0, d_fake_mean=0.0)
    count = 0
    with no_grad():
        for batch in make_batches(dataset, batch_size, shuffle=False, workers=workers):
            fake = g(batch.satellite, Mode.EVAL)
            size = len(batch)
            totals["l1"] += l1_loss(fake, batch.map_img).item() * size
            totals["d_real_mean"] += (
                float(d(batch.satellite, batch.map_img, Mode.EVAL).data.mean()) * size
            )
            totals["d_fake_mean"] += float(d(batch.satellite, fake, Mode.EVAL).data.mean()) * size
            count += size
    return {key: value / count for key, value in totals.items()}


class TrainingState(object):
    """Models, optimizer states, dropout stream and the global step."""

    def __init__(self, g, d, g_opt, d_opt, rng, step=0):
        # type: (Generator, Discriminator, AdamState, AdamState, np.random.Generator, int) -> None
        self.g = g
        self.d = d
        self.g_opt = g_opt
        self.d_opt = d_opt
        self.rng = rng
        self.step = step

    @classmethod
    def from_config(cls, cfg):
        # type: (TrainConfig) -> TrainingState
        init_seed, dropout_seed = np.random.SeedSequence(cfg.seed).spawn(2)
        scheme = InitScheme(std=cfg.init_std, seed=cfg.seed)
        init_rng = np.random.default_rng(init_seed)

        g = Generator(
            cfg.generator_channels,
            cfg.generator_dropout_blocks,
            cfg.leaky_slope,
            cfg.decoder_slope,
            scheme,
            init_rng,
        )
        d = Discriminator(cfg.discriminator_channels, cfg.leaky_slope, scheme, init_rng)
        g_opt = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        d_opt = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        g_opt.ensure_moments(g.named_parameters())
        d_opt.ensure_moments(d.named_parameters())
        logger.info(
            "built generator (%d params) and discriminator (%d params)",
            g.parameter_count(),
            d.parameter_count(),
        )
        return cls(g, d, g_opt, d_opt, np.random.default_rng(dropout_seed))

    def rng_states(self):
        # type: () -> Dict[str, Any]
        return {"dropout": self.rng.bit_generator.state}

    def save(self, path, cfg, epoch):
        # type: (str, TrainConfig, int) -> str
        save_checkpoint(
            path,
            self.g,
            self.d,
            self.g_opt,
            self.d_opt,
            self.step,
            self.rng_states(),
            config=cfg.to_dict(),
            epoch=epoch,
        )
        return path

    def restore(self, checkpoint):
        # type: (Checkpoint) -> None
        dropout_state = checkpoint.rng_states.get("dropout")
        if dropout_state is not None:
            try:
                type(self.rng.bit_generator)().state = dropout_state
            except (TypeError, ValueError, KeyError) as exc:
                raise CheckpointIntegrityError("unusable dropout rng state: {}".format(exc))
        checkpoint.restore(self.g, self.d, self.g_opt, self.d_opt)
        if dropout_state is not None:
            self.rng.bit_generator.state = dropout_state
        self.step = checkpoint.step


class FitResult(object):
    def __init__(self, state, history, checkpoints):
        # type: (TrainingState, List[StepMetrics], List[str]) -> None
        self.state = state
        self.history = history
        self.checkpoints = checkpoints

    @property
    def g(self):
        return self.state.g

    @property
    def d(self):
        return self.state.d


def shuffle_seed(seed, epoch):
    # type: (int, int) -> List[int]
    return [seed, epoch]


def _append_metrics(handle, record):
    handle.write(json.dumps(record, sort_keys=True) + "\n")
    handle.flush()


def fit(cfg):
    # type: (TrainConfig) -> FitResult
    """Train for `cfg.epochs` epochs (or until `cfg.max_steps` global steps).

    Writes `checkpoints/ckpt_<epoch>.bin` every `checkpoint_every` epochs,
    `samples/step_<n>.png` every `sample_every` steps and one JSON line per
    step to `metrics.log`. A run stopped by `max_steps` mid-epoch also
    writes `checkpoints/ckpt_step_<n>.bin`, which `cfg.resume` accepts.

    :raises EmptyDatasetError: the train split holds no images
    """
    cfg.validate()
    train_ds = PairedDataset.from_root(
        cfg.data_root, TRAIN_SPLIT, cfg.resize_to, cfg.swap_halves
    )
    if len(train_ds) == 0:
        raise EmptyDatasetError(
            "no training images under {!r}".format(os.path.join(cfg.data_root, TRAIN_SPLIT))
        )
    val_ds = None  # type: Optional[PairedDataset]
    if cfg.val_every:
        val_ds = PairedDataset.from_root(
            cfg.data_root, VAL_SPLIT, cfg.resize_to, cfg.swap_halves
        )
        if len(val_ds) == 0:
            logger.warning("validation requested but the val split is empty")
            val_ds = None

    state = TrainingState.from_config(cfg)
    if cfg.resume:
        state.restore(load_checkpoint(cfg.resume))
        logger.info("resumed from %s at step %d", cfg.resume, state.step)

    steps_per_epoch = int(math.ceil(len(train_ds) / float(cfg.batch_size)))
    first_epoch, start_batch = divmod(state.step, steps_per_epoch)
    if not os.path.isdir(cfg.output_dir):
        os.makedirs(cfg.output_dir)

    history = []  # type: List[StepMetrics]
    checkpoints = []  # type: List[str]
    metrics_mode = "a" if cfg.resume else "w"
    with open(os.path.join(cfg.output_dir, METRICS_FILE), metrics_mode) as metrics_log:
        for epoch in range(first_epoch, cfg.epochs):
            if _reached_max_steps(cfg, state.step):
                break
            logger.info("epoch %d/%d started", epoch + 1, cfg.epochs)
            if start_batch:
                logger.debug("skipping %d consumed batches", start_batch)
            batches = make_batches(
                train_ds,
                cfg.batch_size,
                shuffle=True,
                seed=shuffle_seed(cfg.seed, epoch),
                start_batch=start_batch,
                workers=cfg.workers,
            )
            start_batch = 0

            for batch in batches:
                state.step += 1
                metrics = train_step(
                    batch, state.g, state.d, state.g_opt, state.d_opt, cfg, state.rng, state.step
                )
                history.append(metrics)
                _append_metrics(
                    metrics_log, dict(metrics.to_dict(), split="train", epoch=epoch + 1)
                )
                if state.step % cfg.sample_every == 0:
                    _emit_step_sample(state, batch, cfg)
                if _reached_max_steps(cfg, state.step):
                    break

            saved = False
            if state.step % steps_per_epoch == 0:
                logger.info("epoch %d/%d finished at step %d", epoch + 1, cfg.epochs, state.step)
                if val_ds is not None and (epoch + 1) % cfg.val_every == 0:
                    summary = evaluate(state.g, state.d, val_ds, cfg.batch_size, cfg.workers)
                    logger.info("validation after epoch %d: %s", epoch + 1, summary)
                    _append_metrics(
                        metrics_log, dict(summary, split="val", epoch=epoch + 1, step=state.step)
                    )
                if (epoch + 1) % cfg.checkpoint_every == 0:
                    path = os.path.join(
                        cfg.output_dir, CHECKPOINT_DIR, "ckpt_{}.bin".format(epoch + 1)
                    )
                    checkpoints.append(state.save(path, cfg, epoch + 1))
                    saved = True

            if _reached_max_steps(cfg, state.step):
                if not saved:
                    path = os.path.join(
                        cfg.output_dir, CHECKPOINT_DIR, "ckpt_step_{}.bin".format(state.step)
                    )
                    checkpoints.append(state.save(path, cfg, epoch + 1))
                logger.info("stopping at max_steps=%d", cfg.max_steps)
                break

    return FitResult(state, history, checkpoints)


def _reached_max_steps(cfg, step):
    # type: (TrainConfig, int) -> bool
    return cfg.max_steps is not None and step >= cfg.max_steps


def _emit_step_sample(state, batch, cfg):
    # type: (TrainingState, Batch, TrainConfig) -> str
    rows = min(SAMPLE_ROWS, len(batch))
    satellite = Tensor(batch.satellite.data[:rows])
    with no_grad():
        generated = state.g(satellite, Mode.EVAL)
    path = os.path.join(cfg.output_dir, SAMPLE_DIR, "step_{}.png".format(state.step))
    return emit_sample_grid(satellite, generated, batch.map_img.data[:rows], path)
