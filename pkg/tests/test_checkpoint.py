"""
test_checkpoint.py
Tests für den RVTK-Checkpoint-Container
"""

import sys
from pathlib import Path

# Projekt-Root zum Path hinzufügen
sys.path.insert(0, str(Path(__file__).parent.parent))

import shutil
import tempfile
import unittest

import numpy as np

from checkpoint import MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from config import InvalidArgumentError


class TestCheckpoint(unittest.TestCase):
    """Tests für save_checkpoint / load_checkpoint"""

    def setUp(self):
        self.tmpdir = Path(tempfile.mkdtemp())
        rng = np.random.default_rng(0)
        self.tensors = {
            "t60/0.weight": rng.standard_normal((4, 1, 3, 3)).astype(np.float32),
            "t60/0.bias": rng.standard_normal(4).astype(np.float32),
            "scalar": np.array(2.5, dtype=np.float32),
        }
        self.header = {"kind": "t60", "seed": 3, "history": [{"epoch": 1, "train_loss": 0.5}]}

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_round_trip(self):
        path = save_checkpoint(self.tmpdir / "m.rvtk", Checkpoint(self.header, self.tensors))
        self.assertEqual(path.read_bytes()[:4], MAGIC)
        ckpt = load_checkpoint(path, expected_kind="t60")
        self.assertEqual(list(ckpt.tensors), list(self.tensors))
        for name, arr in self.tensors.items():
            np.testing.assert_array_equal(ckpt.tensors[name], arr)
        self.assertEqual(ckpt.history, self.header["history"])
        self.assertEqual(ckpt.subset("t60/")["0.bias"].shape, (4,))

    def test_float64_stored_as_float32(self):
        arr = np.array([0.1, 1.0 / 3.0])
        ckpt = load_checkpoint(save_checkpoint(self.tmpdir / "m.rvtk", Checkpoint({"kind": "x"}, {"a": arr})))
        np.testing.assert_array_equal(ckpt.tensors["a"], arr.astype(np.float32))

    def test_in_memory_matches_disk(self):
        """Im Speicher liegen dieselben float32-Werte wie nach dem Laden, entkoppelt vom Quell-Array"""
        live = np.array([0.1, 1.0 / 3.0, 2.0])
        ckpt = Checkpoint({"kind": "x"}, {"w": live})
        live[...] = 0.0
        self.assertEqual(ckpt.tensors["w"].dtype, np.float32)
        loaded = load_checkpoint(save_checkpoint(self.tmpdir / "m.rvtk", ckpt))
        np.testing.assert_array_equal(ckpt.tensors["w"], loaded.tensors["w"])
        np.testing.assert_array_equal(ckpt.tensors["w"], np.array([0.1, 1.0 / 3.0, 2.0], dtype=np.float32))

    def test_bad_magic(self):
        (self.tmpdir / "bad.rvtk").write_bytes(b"NOPE" + b"\x00" * 20)
        with self.assertRaises(InvalidArgumentError):
            load_checkpoint(self.tmpdir / "bad.rvtk")

    def test_truncated(self):
        path = save_checkpoint(self.tmpdir / "m.rvtk", Checkpoint(self.header, self.tensors))
        path.write_bytes(path.read_bytes()[:-8])
        with self.assertRaises(InvalidArgumentError):
            load_checkpoint(path)

    def test_wrong_kind(self):
        path = save_checkpoint(self.tmpdir / "m.rvtk", Checkpoint(self.header, self.tensors))
        with self.assertRaises(InvalidArgumentError):
            load_checkpoint(path, expected_kind="derev")

    def test_missing(self):
        with self.assertRaises(InvalidArgumentError):
            load_checkpoint(self.tmpdir / "none.rvtk")


if __name__ == "__main__":
    unittest.main()
