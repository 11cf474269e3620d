import io
import tempfile
import unittest
from pathlib import Path

import numpy as np
from numpy.testing import assert_array_equal

from codealign.protocol import (
    NO_ROW_HASH,
    Checkpoint,
    MatrixBlock,
    load_matrix,
    save_matrix,
)
from codealign.tsv import MissingInputError


class MatrixBlockTest(unittest.TestCase):
    def test_header_layout(self):
        buf = io.BytesIO()
        MatrixBlock(np.array([[1.0, 2.0, 3.0]]), b"\x01" * 32).write_to(buf)
        blob = buf.getvalue()
        self.assertEqual(blob[:4], b"GAME")
        self.assertEqual(blob[4:6], b"\x01\x00")  # version 1, little-endian
        self.assertEqual(blob[6:10], b"\x01\x00\x00\x00")
        self.assertEqual(blob[10:14], b"\x03\x00\x00\x00")
        self.assertEqual(blob[14:46], b"\x01" * 32)
        self.assertEqual(len(blob), 46 + 3 * 8)

    def test_bit_exact(self):
        rng = np.random.default_rng(0)
        matrix = rng.normal(size=(7, 5))
        matrix[0, 0] = np.nextafter(1.0, 2.0)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "x.bin"
            save_matrix(path, matrix, b"\x02" * 32)
            loaded = load_matrix(path, b"\x02" * 32)
        self.assertEqual(loaded.tobytes(), matrix.tobytes())

    def test_row_hash_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "x.bin"
            save_matrix(path, np.zeros((2, 2)), b"\x02" * 32)
            with self.assertRaisesRegex(ValueError, "row order"):
                load_matrix(path, b"\x03" * 32)

    def test_bad_magic(self):
        with self.assertRaisesRegex(ValueError, "magic"):
            MatrixBlock.read_from(io.BytesIO(b"NOPE" + bytes(42)))

    def test_truncated(self):
        buf = io.BytesIO()
        MatrixBlock(np.ones((3, 3))).write_to(buf)
        with self.assertRaisesRegex(ValueError, "Missing"):
            MatrixBlock.read_from(io.BytesIO(buf.getvalue()[:-5]))

    def test_eof(self):
        with self.assertRaises(EOFError):
            MatrixBlock.read_from(io.BytesIO(b""))

    def test_empty_matrix(self):
        buf = io.BytesIO()
        MatrixBlock(np.zeros((0, 4))).write_to(buf)
        buf.seek(0)
        self.assertEqual(MatrixBlock.read_from(buf).matrix.shape, (0, 4))

    def test_missing_file(self):
        with self.assertRaises(MissingInputError):
            load_matrix(Path("/nonexistent/x.bin"))


class CheckpointTest(unittest.TestCase):
    def test_save_load(self):
        checkpoint = Checkpoint(
            params={"s1.gat.W": np.eye(3), "s1.gat.a1": np.arange(3.0)[None, :]},
            epoch=7,
            learning_rate=0.00093,
            extra={"best": np.full((2, 2), 0.5)},
        )
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ckpt.bin"
            checkpoint.save(path)
            loaded = Checkpoint.load(path)
        self.assertEqual(loaded.epoch, 7)
        self.assertEqual(loaded.learning_rate, 0.00093)
        self.assertEqual(sorted(loaded.params), ["s1.gat.W", "s1.gat.a1"])
        assert_array_equal(loaded.params["s1.gat.W"], np.eye(3))
        assert_array_equal(loaded.extra["best"], np.full((2, 2), 0.5))

    def test_params_use_no_row_hash(self):
        buf = io.BytesIO()
        Checkpoint({"w": np.ones((1, 1))}).write_to(buf)
        self.assertIn(NO_ROW_HASH, buf.getvalue())

    def test_truncated_section(self):
        buf = io.BytesIO()
        Checkpoint({"w": np.ones((2, 2))}).write_to(buf)
        with self.assertRaises(ValueError):
            Checkpoint.read_from(io.BytesIO(buf.getvalue()[:-3]))
