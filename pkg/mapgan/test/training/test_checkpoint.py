import json
import os
import tempfile
from unittest import TestCase

import bitstring
import numpy as np

from mapgan.training import checkpoint
from mapgan.training.config import TrainConfig
from mapgan.training.train import TrainingState
from mapgan.test.fixtures import toy_config


class TestCheckpoint(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.cfg = toy_config(self.tmp.name, self.tmp.name, seed=3)
        self.state = TrainingState.from_config(self.cfg)
        # make every buffer distinguishable from a fresh init
        rng = np.random.default_rng(0)
        for _, array in checkpoint.model_arrays(
            self.state.g, self.state.d, self.state.g_opt, self.state.d_opt
        ).items():
            array[...] = rng.standard_normal(array.shape)
        self.state.g_opt.t = 5
        self.state.d_opt.t = 5
        self.state.step = 17
        self.path = os.path.join(self.tmp.name, "ckpt.bin")

    def _fresh(self, seed=99):
        return TrainingState.from_config(toy_config(self.tmp.name, self.tmp.name, seed=seed))

    def test_save_load__round_trip__every_tensor_bit_identical(self):
        self.state.save(self.path, self.cfg, epoch=2)
        restored = self._fresh()
        restored.restore(checkpoint.load_checkpoint(self.path))

        before = checkpoint.model_arrays(
            self.state.g, self.state.d, self.state.g_opt, self.state.d_opt
        )
        after = checkpoint.model_arrays(restored.g, restored.d, restored.g_opt, restored.d_opt)
        self.assertEqual(list(before), list(after))
        for name in before:
            self.assertEqual(before[name].tobytes(), after[name].tobytes(), name)
        self.assertEqual(17, restored.step)
        self.assertEqual(5, restored.g_opt.t)
        self.assertEqual(
            self.state.rng.bit_generator.state, restored.rng.bit_generator.state
        )

    def test_save__names__mirror_module_hierarchy(self):
        self.state.save(self.path, self.cfg, epoch=1)
        names = [t["name"] for t in checkpoint.read_manifest(self.path)["tensors"]]
        self.assertIn("G.enc2.conv.kernel", names)
        self.assertIn("G.enc2.bn.running_mean", names)
        self.assertIn("D.head.bias", names)
        self.assertIn("G_opt.m.enc2.conv.kernel", names)
        self.assertIn("D_opt.v.stage1.conv.kernel", names)

    def test_save__header__magic_version_and_manifest_length(self):
        self.state.save(self.path, self.cfg, epoch=1)
        with open(self.path, "rb") as handle:
            head = handle.read(checkpoint.HEADER_BYTES)
        magic, version, length = bitstring.ConstBitStream(bytes=head).readlist(
            checkpoint.HEADER_FORMAT
        )
        self.assertEqual(b"MGCK", magic)
        self.assertEqual(checkpoint.FORMAT_VERSION, version)
        self.assertLess(length, os.path.getsize(self.path))

    def test_save__config_snapshot__recorded(self):
        self.state.save(self.path, self.cfg, epoch=1)
        ckpt = checkpoint.load_checkpoint(self.path)
        self.assertEqual(self.cfg, TrainConfig.from_dict(ckpt.config))
        self.assertEqual(1, ckpt.epoch)

    def test_save__no_temp_files_left_behind(self):
        self.state.save(self.path, self.cfg, epoch=1)
        leftovers = [n for n in os.listdir(self.tmp.name) if n.endswith(".tmp")]
        self.assertEqual([], leftovers)

    def test_load__truncated_payload__integrity_error_nothing_applied(self):
        self.state.save(self.path, self.cfg, epoch=1)
        with open(self.path, "rb") as handle:
            blob = handle.read()
        with open(self.path, "wb") as handle:
            handle.write(blob[:-10])

        restored = self._fresh()
        before = {
            k: v.copy()
            for k, v in checkpoint.model_arrays(
                restored.g, restored.d, restored.g_opt, restored.d_opt
            ).items()
        }
        with self.assertRaises(checkpoint.CheckpointIntegrityError):
            restored.restore(checkpoint.load_checkpoint(self.path))
        after = checkpoint.model_arrays(restored.g, restored.d, restored.g_opt, restored.d_opt)
        for name, array in before.items():
            np.testing.assert_array_equal(array, after[name])
        self.assertEqual(0, restored.step)

    def _rewrite_manifest(self, edit):
        with open(self.path, "rb") as handle:
            blob = handle.read()
        manifest = checkpoint.read_manifest(self.path)
        length = bitstring.ConstBitStream(bytes=blob[: checkpoint.HEADER_BYTES]).readlist(
            checkpoint.HEADER_FORMAT
        )[2]
        payload = blob[checkpoint.HEADER_BYTES + length :]
        edit(manifest)
        raw = json.dumps(manifest).encode("utf-8")
        header = bitstring.pack(
            checkpoint.HEADER_FORMAT, checkpoint.MAGIC, checkpoint.FORMAT_VERSION, len(raw)
        )
        with open(self.path, "wb") as handle:
            handle.write(header.bytes + raw + payload)

    def _arrays(self, state):
        return {
            k: v.copy()
            for k, v in checkpoint.model_arrays(state.g, state.d, state.g_opt, state.d_opt).items()
        }

    def test_load__manifest_without_optimizers__integrity_error(self):
        self.state.save(self.path, self.cfg, epoch=1)
        self._rewrite_manifest(lambda m: m.pop("optimizers"))
        with self.assertRaises(checkpoint.CheckpointIntegrityError) as ctx:
            checkpoint.load_checkpoint(self.path)
        self.assertIn("optimizer", str(ctx.exception))

    def test_load__tensor_entry_without_digest__integrity_error(self):
        self.state.save(self.path, self.cfg, epoch=1)
        self._rewrite_manifest(lambda m: m["tensors"][0].pop("sha256"))
        self.assertRaises(
            checkpoint.CheckpointIntegrityError, checkpoint.load_checkpoint, self.path
        )

    def test_read_manifest__missing_step__integrity_error(self):
        self.state.save(self.path, self.cfg, epoch=1)
        self._rewrite_manifest(lambda m: m.pop("step"))
        self.assertRaises(
            checkpoint.CheckpointIntegrityError, checkpoint.read_manifest, self.path
        )

    def test_restore__optimizer_scalars_missing__nothing_applied(self):
        self.state.save(self.path, self.cfg, epoch=1)
        ckpt = checkpoint.load_checkpoint(self.path)
        del ckpt.manifest["optimizers"]["D_opt"]["eps"]

        restored = self._fresh()
        before = self._arrays(restored)
        with self.assertRaises(checkpoint.CheckpointIntegrityError):
            restored.restore(ckpt)
        after = self._arrays(restored)
        for name, array in before.items():
            np.testing.assert_array_equal(array, after[name], err_msg=name)
        self.assertEqual(0, restored.step)
        self.assertEqual(0, restored.g_opt.t)

    def test_restore__unusable_rng_state__nothing_applied(self):
        self.state.save(self.path, self.cfg, epoch=1)
        ckpt = checkpoint.load_checkpoint(self.path)
        ckpt.manifest["rng_states"]["dropout"] = {"bit_generator": "nonsense"}

        restored = self._fresh()
        before = self._arrays(restored)
        self.assertRaises(checkpoint.CheckpointIntegrityError, restored.restore, ckpt)
        after = self._arrays(restored)
        for name, array in before.items():
            np.testing.assert_array_equal(array, after[name], err_msg=name)

    def test_load__trailing_bytes__integrity_error(self):
        self.state.save(self.path, self.cfg, epoch=1)
        with open(self.path, "ab") as handle:
            handle.write(b"\x00" * 4)
        self.assertRaises(
            checkpoint.CheckpointIntegrityError, checkpoint.load_checkpoint, self.path
        )

    def test_load__flipped_payload_byte__digest_mismatch(self):
        self.state.save(self.path, self.cfg, epoch=1)
        with open(self.path, "r+b") as handle:
            handle.seek(-3, os.SEEK_END)
            value = handle.read(1)
            handle.seek(-3, os.SEEK_END)
            handle.write(bytes([value[0] ^ 0xFF]))
        with self.assertRaises(checkpoint.CheckpointIntegrityError) as ctx:
            checkpoint.load_checkpoint(self.path)
        self.assertIn("digest", str(ctx.exception))

    def test_load__bad_magic__integrity_error(self):
        with open(self.path, "wb") as handle:
            handle.write(b"PNG\x00" + b"\x00" * 32)
        self.assertRaises(
            checkpoint.CheckpointIntegrityError, checkpoint.load_checkpoint, self.path
        )

    def test_restore__different_architecture__integrity_error(self):
        self.state.save(self.path, self.cfg, epoch=1)
        other = TrainingState.from_config(
            toy_config(self.tmp.name, self.tmp.name, generator_channels=(4, 8, 8, 16))
        )
        self.assertRaises(
            checkpoint.CheckpointIntegrityError,
            other.restore,
            checkpoint.load_checkpoint(self.path),
        )
