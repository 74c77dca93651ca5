"""Synthetic corpora and small model configurations shared by the tests."""
import os

import numpy as np
from PIL import Image

from mapgan.training.config import TrainConfig

# 4 encoder blocks: 16x16 inputs reach a 1x1 bottleneck
TOY_GENERATOR_CHANNELS = (4, 8, 8, 8)
TOY_DISCRIMINATOR_CHANNELS = (4, 8)
TOY_SIZE = 16


def pair_pixels(width, height, seed=0):
    """A random satellite|map pair as HWC bytes; the map is a simple function
    of the satellite so a generator can learn it."""
    rng = np.random.default_rng(seed)
    half = width // 2
    satellite = rng.integers(0, 256, size=(height, half, 3), dtype=np.uint8)
    map_img = (255 - satellite) // 2
    return np.concatenate([satellite, map_img], axis=1)


def write_pair(path, width, height, seed=0):
    Image.fromarray(pair_pixels(width, height, seed)).save(path, format="PNG")
    return path


def write_corpus(root, count, size=TOY_SIZE, split="train", seed=0):
    """`count` PNG pairs of size x size tiles under `root/split`."""
    directory = os.path.join(root, split)
    if not os.path.isdir(directory):
        os.makedirs(directory)
    return [
        write_pair(
            os.path.join(directory, "pair_{:04d}.png".format(i)), 2 * size, size, seed + i
        )
        for i in range(count)
    ]


def toy_config(root, out, **overrides):
    values = dict(
        data_root=root,
        output_dir=out,
        epochs=1,
        batch_size=2,
        resize_to=TOY_SIZE,
        generator_channels=TOY_GENERATOR_CHANNELS,
        generator_dropout_blocks=1,
        discriminator_channels=TOY_DISCRIMINATOR_CHANNELS,
        sample_every=1000,
        seed=0,
    )
    values.update(overrides)
    return TrainConfig(**values).validate()
