"""Map generation from bare satellite tiles with a trained checkpoint."""
import logging
import os

import numpy as np
from PIL import Image

from typing import Dict, List, Optional, Tuple  # noqa F401

from mapgan.autodiff.ops import Mode
from mapgan.autodiff.tensor import Tensor, no_grad
from mapgan.data.paired import denormalize, list_images, load_satellite_image
from mapgan.networks.gan import Generator  # noqa F401
from mapgan.training.checkpoint import load_checkpoint
from mapgan.training.config import TrainConfig
from mapgan.training.train import TrainingState

logger = logging.getLogger(__name__)


class IncompatibleResolutionError(ValueError):
    def __init__(self, path, shape, expected):
        super(IncompatibleResolutionError, self).__init__(
            "{!r} is {}x{}, the model expects {}x{}".format(
                path, shape[-1], shape[-2], expected, expected
            )
        )
        self.path = path
        self.expected = expected


class OutputCollisionError(ValueError):
    def __init__(self, target, sources):
        super(OutputCollisionError, self).__init__(
            "{} would all be written to {!r}".format(", ".join(map(repr, sources)), target)
        )
        self.target = target
        self.sources = sources


def load_generator(checkpoint_path):
    # type: (str) -> Tuple[Generator, TrainConfig]
    """Rebuild the generator recorded in a checkpoint, weights included."""
    checkpoint = load_checkpoint(checkpoint_path)
    cfg = TrainConfig.from_dict(checkpoint.config)
    state = TrainingState.from_config(cfg)
    state.restore(checkpoint)
    return state.g, cfg


def generate_map(g, satellite, stochastic=False, rng=None):
    # type: (Generator, np.ndarray, bool, Optional[np.random.Generator]) -> np.ndarray
    """Generated map for one CHW satellite tile, as HWC bytes.

    Batch norm always uses running statistics; `stochastic` keeps dropout
    active, drawing masks from `rng`.
    """
    x = Tensor(satellite[np.newaxis])
    with no_grad():
        if stochastic:
            out = g(x, Mode.EVAL, rng, dropout_mode=Mode.TRAIN)
        else:
            out = g(x, Mode.EVAL)
    return denormalize(out.data[0])


def input_paths(path):
    # type: (str) -> List[str]
    if os.path.isdir(path):
        return list_images(path)
    return [path]


def output_path(input_path, out_dir):
    # type: (str, str) -> str
    stem = os.path.splitext(os.path.basename(input_path))[0]
    return os.path.join(out_dir, stem + ".png")


def check_output_paths(sources, out_dir):
    # type: (List[str], str) -> List[str]
    """Output path per source; two sources sharing a stem raise OutputCollisionError."""
    claimed = {}  # type: Dict[str, List[str]]
    targets = []
    for source in sources:
        target = output_path(source, out_dir)
        claimed.setdefault(target, []).append(source)
        targets.append(target)
    for target, owners in claimed.items():
        if len(owners) > 1:
            raise OutputCollisionError(target, owners)
    return targets


def infer(checkpoint_path, input_path, out_dir, stochastic=False, seed=0):
    # type: (str, str, str, bool, int) -> List[str]
    """Write one generated map PNG per input image; returns the written paths.

    :raises IncompatibleResolutionError: an input is not resize_to x resize_to
        for the checkpoint's configuration
    :raises OutputCollisionError: two inputs map to the same output file
    """
    g, cfg = load_generator(checkpoint_path)
    rng = np.random.default_rng(seed) if stochastic else None

    sources = input_paths(input_path)
    targets = check_output_paths(sources, out_dir)
    satellites = []
    for source in sources:
        satellite = load_satellite_image(source)
        if satellite.shape[1:] != (cfg.resize_to, cfg.resize_to):
            raise IncompatibleResolutionError(source, satellite.shape, cfg.resize_to)
        satellites.append(satellite)

    if not os.path.isdir(out_dir):
        os.makedirs(out_dir)
    written = []
    for target, satellite in zip(targets, satellites):
        Image.fromarray(generate_map(g, satellite, stochastic, rng)).save(target, format="PNG")
        logger.info("wrote %s", target)
        written.append(target)
    return written
