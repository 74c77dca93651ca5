"""Checkpoint files: a fixed header, a JSON manifest, raw float32 payloads.

File layout::

    bytes:4     magic b"MGCK"
    uintle:16   format version
    uintle:64   manifest length in bytes
    manifest    UTF-8 JSON: step, epoch, config snapshot, RNG states,
                optimizer scalars, and per-tensor name/shape/offset/nbytes/sha256
    payload     little-endian float32 row-major tensors, back to back

Tensor names mirror the module hierarchy, e.g. `G.enc3.conv.kernel`,
`G.enc3.bn.running_mean`, `G_opt.m.enc3.conv.kernel`.
"""
import collections
import hashlib
import json
import logging
import os
import tempfile

import bitstring
import numpy as np

from typing import Any, Dict, Optional  # noqa F401

logger = logging.getLogger(__name__)

MAGIC = b"MGCK"
FORMAT_VERSION = 1
HEADER_FORMAT = ["bytes:4", "uintle:16", "uintle:64"]
HEADER_BYTES = 4 + 2 + 8
PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointIntegrityError(ValueError):
    pass


def model_arrays(g, d, g_opt, d_opt):
    """Every array a training run needs to continue, keyed by checkpoint name."""
    arrays = collections.OrderedDict()
    for prefix, model in (("G.", g), ("D.", d)):
        for name, tensor in model.named_parameters(prefix):
            arrays[name] = tensor.data
        for name, buffer in model.named_buffers(prefix):
            arrays[name] = buffer
    for prefix, state in (("G_opt.", g_opt), ("D_opt.", d_opt)):
        for name, buffer in state.named_buffers(prefix):
            arrays[name] = buffer
    return arrays


def _optimizer_scalars(state):
    return dict(t=state.t, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps)


def _digest(raw):
    return hashlib.sha256(raw).hexdigest()


def save_checkpoint(path, g, d, g_opt, d_opt, step, rng_states, config=None, epoch=None):
    # type: (str, Any, Any, Any, Any, int, Dict[str, Any], Optional[Dict[str, Any]], Optional[int]) -> None
    """Write the complete training state to `path`.

    The file is written to a temporary sibling and renamed into place, so a
    reader never observes a partially written checkpoint.
    """
    arrays = model_arrays(g, d, g_opt, d_opt)

    entries = []
    payloads = []
    offset = 0
    for name, array in arrays.items():
        raw = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE).tobytes()
        entries.append(
            dict(
                name=name,
                shape=list(array.shape),
                offset=offset,
                nbytes=len(raw),
                sha256=_digest(raw),
            )
        )
        payloads.append(raw)
        offset += len(raw)

    manifest = dict(
        format_version=FORMAT_VERSION,
        step=step,
        epoch=epoch,
        config=config or {},
        rng_states=rng_states,
        optimizers={"G_opt": _optimizer_scalars(g_opt), "D_opt": _optimizer_scalars(d_opt)},
        tensors=entries,
    )
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    header = bitstring.pack(HEADER_FORMAT, MAGIC, FORMAT_VERSION, len(manifest_bytes))

    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        os.makedirs(directory)
    handle = tempfile.NamedTemporaryFile(
        dir=directory, prefix=".ckpt-", suffix=".tmp", delete=False
    )
    try:
        with handle:
            handle.write(header.bytes)
            handle.write(manifest_bytes)
            for raw in payloads:
                handle.write(raw)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(handle.name, path)
    except BaseException:
        if os.path.exists(handle.name):
            os.remove(handle.name)
        raise

    logger.info("wrote checkpoint %s (step %d, %d tensors)", path, step, len(entries))


_OPTIMIZER_KEYS = ("G_opt", "D_opt")
_SCALAR_KEYS = ("t", "lr", "beta1", "beta2", "eps")
_ENTRY_FIELDS = (("name", str), ("shape", list), ("offset", int), ("nbytes", int), ("sha256", str))


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_manifest(manifest, path):
    """Raise CheckpointIntegrityError unless every field a restore reads is present."""
    if not isinstance(manifest, dict):
        raise CheckpointIntegrityError("{!r}: manifest is not an object".format(path))
    if not isinstance(manifest.get("step"), int):
        raise CheckpointIntegrityError("{!r}: manifest has no integer step".format(path))

    optimizers = manifest.get("optimizers")
    if not isinstance(optimizers, dict):
        raise CheckpointIntegrityError("{!r}: manifest has no optimizer state".format(path))
    for key in _OPTIMIZER_KEYS:
        scalars = optimizers.get(key)
        if not isinstance(scalars, dict) or not all(
            _is_number(scalars.get(name)) for name in _SCALAR_KEYS
        ):
            raise CheckpointIntegrityError(
                "{!r}: optimizer {} needs numeric {}".format(path, key, list(_SCALAR_KEYS))
            )

    tensors = manifest.get("tensors")
    if not isinstance(tensors, list):
        raise CheckpointIntegrityError("{!r}: manifest has no tensor list".format(path))
    for index, entry in enumerate(tensors):
        if not isinstance(entry, dict):
            raise CheckpointIntegrityError(
                "{!r}: tensor entry {} is malformed".format(path, index)
            )
        for field, kind in _ENTRY_FIELDS:
            if not isinstance(entry.get(field), kind):
                raise CheckpointIntegrityError(
                    "{!r}: tensor entry {} has no valid {}".format(path, index, field)
                )
        if not all(isinstance(n, int) and n >= 0 for n in entry["shape"]):
            raise CheckpointIntegrityError(
                "{!r}: tensor {} has an invalid shape".format(path, entry["name"])
            )
    return manifest


def _read_header(blob, path):
    if len(blob) < HEADER_BYTES:
        raise CheckpointIntegrityError("{!r} is too short to be a checkpoint".format(path))
    stream = bitstring.ConstBitStream(bytes=blob[:HEADER_BYTES])
    magic, version, manifest_len = stream.readlist(HEADER_FORMAT)
    if magic != MAGIC:
        raise CheckpointIntegrityError("{!r} is not a checkpoint (bad magic)".format(path))
    if version != FORMAT_VERSION:
        raise CheckpointIntegrityError(
            "{!r} has unsupported format version {}".format(path, version)
        )
    if len(blob) < HEADER_BYTES + manifest_len:
        raise CheckpointIntegrityError("{!r} manifest is truncated".format(path))
    try:
        manifest = json.loads(blob[HEADER_BYTES : HEADER_BYTES + manifest_len].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointIntegrityError("{!r} manifest is unreadable: {}".format(path, exc))
    return _check_manifest(manifest, path), HEADER_BYTES + manifest_len


def read_manifest(path):
    # type: (str) -> Dict[str, Any]
    """Parse only the header and manifest of a checkpoint."""
    with open(path, "rb") as handle:
        head = handle.read(HEADER_BYTES)
        if len(head) < HEADER_BYTES:
            raise CheckpointIntegrityError("{!r} is too short to be a checkpoint".format(path))
        manifest_len = bitstring.ConstBitStream(bytes=head).readlist(HEADER_FORMAT)[2]
        blob = head + handle.read(manifest_len)
    return _read_header(blob, path)[0]


class Checkpoint(object):
    """A fully verified checkpoint: manifest plus decoded arrays."""

    def __init__(self, manifest, arrays):
        # type: (Dict[str, Any], Dict[str, np.ndarray]) -> None
        self.manifest = manifest
        self.arrays = arrays

    @property
    def step(self):
        # type: () -> int
        return self.manifest["step"]

    @property
    def epoch(self):
        return self.manifest.get("epoch")

    @property
    def config(self):
        # type: () -> Dict[str, Any]
        return self.manifest.get("config", {})

    @property
    def rng_states(self):
        # type: () -> Dict[str, Any]
        return self.manifest.get("rng_states", {})

    def restore(self, g, d, g_opt, d_opt):
        """Copy every array into the given models and optimizer states.

        The manifest, names and shapes are all checked before anything is written.
        """
        _check_manifest(self.manifest, "checkpoint")
        optimizers = self.manifest["optimizers"]
        g_opt.ensure_moments(g.named_parameters())
        d_opt.ensure_moments(d.named_parameters())
        targets = model_arrays(g, d, g_opt, d_opt)

        missing = sorted(set(targets) - set(self.arrays))
        unexpected = sorted(set(self.arrays) - set(targets))
        if missing or unexpected:
            raise CheckpointIntegrityError(
                "checkpoint does not match the models: missing {}, unexpected {}".format(
                    missing[:5], unexpected[:5]
                )
            )
        for name, target in targets.items():
            if target.shape != self.arrays[name].shape:
                raise CheckpointIntegrityError(
                    "{} has shape {} in checkpoint, model expects {}".format(
                        name, self.arrays[name].shape, target.shape
                    )
                )

        for name, target in targets.items():
            target[...] = self.arrays[name]
        for key, state in (("G_opt", g_opt), ("D_opt", d_opt)):
            scalars = optimizers[key]
            state.t = scalars["t"]
            state.lr = scalars["lr"]
            state.beta1 = scalars["beta1"]
            state.beta2 = scalars["beta2"]
            state.eps = scalars["eps"]


def load_checkpoint(path):
    # type: (str) -> Checkpoint
    """Read and verify `path`; nothing is applied to any model here.

    :raises CheckpointIntegrityError: bad header, truncated or oversized
        payload, or a tensor whose size or digest disagrees with the manifest
    """
    with open(path, "rb") as handle:
        blob = handle.read()
    manifest, payload_start = _read_header(blob, path)
    payload = memoryview(blob)[payload_start:]

    arrays = collections.OrderedDict()
    expected_offset = 0
    for entry in manifest.get("tensors", []):
        name, shape = entry["name"], tuple(entry["shape"])
        nbytes, offset = entry["nbytes"], entry["offset"]
        if offset != expected_offset or nbytes != int(np.prod(shape)) * PAYLOAD_DTYPE.itemsize:
            raise CheckpointIntegrityError(
                "{!r}: manifest entry {} has inconsistent offset/size".format(path, name)
            )
        if offset + nbytes > len(payload):
            raise CheckpointIntegrityError(
                "{!r}: payload truncated inside {}".format(path, name)
            )
        raw = payload[offset : offset + nbytes].tobytes()
        if _digest(raw) != entry["sha256"]:
            raise CheckpointIntegrityError("{!r}: digest mismatch for {}".format(path, name))
        arrays[name] = np.frombuffer(raw, dtype=PAYLOAD_DTYPE).astype(np.float32).reshape(shape)
        expected_offset += nbytes

    if expected_offset != len(payload):
        raise CheckpointIntegrityError(
            "{!r}: payload is {} bytes, manifest describes {}".format(
                path, len(payload), expected_offset
            )
        )
    return Checkpoint(manifest, arrays)
