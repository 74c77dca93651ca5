"""Paired satellite|map corpus ingestion.

Each corpus file is one image holding the satellite tile on the left and the
matching map tile on the right. Halves are resized with bilinear
interpolation and normalized from bytes [0, 255] to floats [-1, 1].

Layout: `<root>/train/*.{jpg,jpeg,png}` and `<root>/val/*.{jpg,jpeg,png}`,
canonical order is the lexicographic order of file names.
"""
import concurrent.futures
import logging
import os

import numpy as np
from PIL import Image

from typing import Iterator, List, Optional, Sequence  # noqa F401

from mapgan.autodiff.tensor import DTYPE, Tensor

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
DEFAULT_RESIZE = 256
TRAIN_SPLIT = "train"
VAL_SPLIT = "val"


class UnsplittablePairError(ValueError):
    def __init__(self, path, width):
        super(UnsplittablePairError, self).__init__(
            "unsplittable pair {!r}: width {} is odd".format(path, width)
        )
        self.path = path


class ImageDecodeError(IOError):
    def __init__(self, path, reason):
        super(ImageDecodeError, self).__init__(
            "cannot decode image {!r}: {}".format(path, reason)
        )
        self.path = path


class EmptyDatasetError(ValueError):
    pass


def normalize(pixels):
    # type: (np.ndarray) -> np.ndarray
    """HWC bytes in [0, 255] to a CHW float32 array in [-1, 1]."""
    values = np.asarray(pixels, dtype=DTYPE) / DTYPE(127.5) - DTYPE(1.0)
    return np.ascontiguousarray(values.transpose(2, 0, 1))


def denormalize(values):
    # type: (np.ndarray) -> np.ndarray
    """CHW floats to HWC bytes: clamp to [-1, 1], then round((v + 1) * 127.5).

    Ties round away from zero, so 0.0 maps to 128.
    """
    if isinstance(values, Tensor):
        values = values.data
    scaled = (np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    pixels = np.floor(scaled + 0.5).astype(np.uint8)
    return np.ascontiguousarray(pixels.transpose(1, 2, 0))


def _open_rgb(path):
    try:
        with Image.open(path) as image:
            return image.convert("RGB")
    except (IOError, OSError, ValueError) as exc:
        raise ImageDecodeError(path, exc)


def _resized(image, size):
    if image.size == (size, size):
        return image
    return image.resize((size, size), Image.BILINEAR)


class PairedSample(object):
    """A satellite tile and its map tile, both CHW float32 in [-1, 1]."""

    def __init__(self, satellite, map_img, source_path):
        # type: (np.ndarray, np.ndarray, str) -> None
        if satellite.shape != map_img.shape:
            raise ValueError(
                "pair halves differ in shape: {} vs {}".format(
                    satellite.shape, map_img.shape
                )
            )
        self.satellite = satellite
        self.map_img = map_img
        self.source_path = source_path

    def __repr__(self):
        return "PairedSample({!r}, shape={})".format(self.source_path, self.satellite.shape)


def load_paired_image(path, resize_to=DEFAULT_RESIZE, swap_halves=False):
    # type: (str, int, bool) -> PairedSample
    """Decode `path`, split it down the middle and normalize both halves.

    :param path: concatenated satellite|map image (PNG or JPEG)
    :param resize_to: side length of the square output tiles
    :param swap_halves: the corpus stores the map on the left
    :raises UnsplittablePairError: the image width is odd
    :raises ImageDecodeError: the file cannot be decoded
    """
    image = _open_rgb(path)
    width, height = image.size
    if width % 2:
        raise UnsplittablePairError(path, width)

    half = width // 2
    left = image.crop((0, 0, half, height))
    right = image.crop((half, 0, width, height))
    if swap_halves:
        left, right = right, left

    return PairedSample(
        satellite=normalize(np.asarray(_resized(left, resize_to))),
        map_img=normalize(np.asarray(_resized(right, resize_to))),
        source_path=path,
    )


def load_satellite_image(path):
    # type: (str) -> np.ndarray
    """Decode a bare satellite tile (no map half) to CHW float32 in [-1, 1]."""
    return normalize(np.asarray(_open_rgb(path)))


def list_images(directory):
    # type: (str) -> List[str]
    if not os.path.isdir(directory):
        return []
    return [
        os.path.join(directory, name)
        for name in sorted(os.listdir(directory))
        if name.lower().endswith(IMAGE_EXTENSIONS)
    ]


class PairedDataset(object):
    """Lazily decoded records of one corpus split."""

    def __init__(self, paths, split=TRAIN_SPLIT, resize_to=DEFAULT_RESIZE, swap_halves=False):
        # type: (Sequence[str], str, int, bool) -> None
        self.paths = list(paths)
        self.split = split
        self.resize_to = resize_to
        self.swap_halves = swap_halves

    @classmethod
    def from_root(cls, root, split=TRAIN_SPLIT, resize_to=DEFAULT_RESIZE, swap_halves=False):
        # type: (str, str, int, bool) -> PairedDataset
        paths = list_images(os.path.join(root, split))
        logger.info("found %d %s images under %s", len(paths), split, root)
        return cls(paths, split=split, resize_to=resize_to, swap_halves=swap_halves)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, index):
        # type: (int) -> PairedSample
        return load_paired_image(self.paths[index], self.resize_to, self.swap_halves)

    def __repr__(self):
        return "PairedDataset(split={!r}, records={}, resize_to={})".format(
            self.split, len(self.paths), self.resize_to
        )


class Batch(object):
    """Stacked halves of consecutive samples: two [B, 3, H, W] tensors."""

    def __init__(self, samples):
        # type: (Sequence[PairedSample]) -> None
        self.satellite = Tensor(np.stack([s.satellite for s in samples]))
        self.map_img = Tensor(np.stack([s.map_img for s in samples]))
        self.paths = [s.source_path for s in samples]

    def __len__(self):
        return len(self.paths)


def epoch_order(count, shuffle, seed):
    # type: (int, bool, Optional[int]) -> np.ndarray
    """Sample order for one epoch: identity, or a seeded Fisher-Yates shuffle."""
    order = np.arange(count)
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    return order


def batch_indices(count, batch_size, shuffle=True, seed=0):
    # type: (int, int, bool, Optional[int]) -> List[np.ndarray]
    """Split one epoch into batches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1, got {}".format(batch_size))
    if count == 0:
        raise EmptyDatasetError("cannot batch an empty dataset")
    order = epoch_order(count, shuffle, seed)
    return [order[i : i + batch_size] for i in range(0, count, batch_size)]


def make_batches(ds, batch_size, shuffle=True, seed=0, start_batch=0, workers=1):
    # type: (PairedDataset, int, bool, Optional[int], int, int) -> Iterator[Batch]
    """Yield the batches of one epoch in seeded order.

    Batches before `start_batch` are skipped without being decoded. With
    `workers` > 1 records are decoded on a thread pool; the order of the
    yielded batches does not depend on the worker count.
    """
    groups = batch_indices(len(ds), batch_size, shuffle, seed)[start_batch:]
    if workers <= 1:
        for group in groups:
            yield Batch([ds[int(i)] for i in group])
        return

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        for group in groups:
            yield Batch(list(pool.map(ds.__getitem__, [int(i) for i in group])))
