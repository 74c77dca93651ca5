import logging
import os

import numpy as np
from PIL import Image

from typing import Sequence  # noqa F401

from mapgan.autodiff.tensor import Tensor
from mapgan.data.paired import denormalize

logger = logging.getLogger(__name__)

GRID_COLUMNS = ("satellite", "generated", "real")


def _array(image):
    return image.data if isinstance(image, Tensor) else np.asarray(image)


def _tiles(images):
    # accepts a batched [B,3,H,W] array/Tensor or a sequence of [3,H,W]
    if isinstance(images, (Tensor, np.ndarray)):
        batch = _array(images)
        return [batch[i] for i in range(batch.shape[0])]
    return [_array(image) for image in images]


def sample_grid(satellites, generated, reals):
    # type: (Sequence, Sequence, Sequence) -> np.ndarray
    """One row per sample, columns satellite | generated | real, as HWC bytes."""
    columns = [_tiles(satellites), _tiles(generated), _tiles(reals)]
    lengths = [len(column) for column in columns]
    if len(set(lengths)) != 1:
        raise ValueError(
            "sample grid columns differ in length: {}".format(
                dict(zip(GRID_COLUMNS, lengths))
            )
        )
    if lengths[0] == 0:
        raise ValueError("sample grid needs at least one sample")

    rows = []
    for row in zip(*columns):
        shapes = {tile.shape for tile in row}
        if len(shapes) != 1:
            raise ValueError("sample grid tiles differ in shape: {}".format(sorted(shapes)))
        rows.append(np.concatenate([denormalize(tile) for tile in row], axis=1))
    return np.concatenate(rows, axis=0)


def emit_sample_grid(satellites, generated, reals, path):
    # type: (Sequence, Sequence, Sequence, str) -> str
    """Write the satellite/generated/real grid to `path` as an 8-bit RGB PNG."""
    grid = sample_grid(satellites, generated, reals)
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        os.makedirs(directory)
    Image.fromarray(grid).save(path, format="PNG")
    logger.info("wrote sample grid %s (%dx%d)", path, grid.shape[1], grid.shape[0])
    return path
