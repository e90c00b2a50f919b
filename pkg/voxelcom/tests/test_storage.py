import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from voxelcom.exceptions import FormatError
from voxelcom.nn import Dense, ParameterSet
from voxelcom.storage import (
    content_hash,
    pack_frame,
    read_checkpoint,
    read_manifest,
    read_ppm,
    unpack_frame,
    write_checkpoint,
    write_manifest,
    write_ppm,
)


class StorageTest(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)
        self.tmp = Path(self._tmp.name)

    def test_checkpoint_keeps_names_and_shapes(self):
        tensors = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], dtype=np.float32)}
        write_checkpoint(self.tmp / "x.vckp", tensors)
        loaded = read_checkpoint(self.tmp / "x.vckp")
        self.assertEqual(list(loaded), ["a.weight", "b"])
        np.testing.assert_array_equal(loaded["a.weight"], tensors["a.weight"])

    def test_bad_magic_and_truncation(self):
        (self.tmp / "bad.vckp").write_bytes(b"NOPE0000")
        with self.assertRaises(FormatError):
            read_checkpoint(self.tmp / "bad.vckp")
        write_checkpoint(self.tmp / "x.vckp", {"w": np.ones((4, 4), dtype=np.float32)})
        blob = (self.tmp / "x.vckp").read_bytes()
        (self.tmp / "short.vckp").write_bytes(blob[:-5])
        with self.assertRaises(FormatError):
            read_checkpoint(self.tmp / "short.vckp")

    def test_parameter_set_checks_shapes_on_load(self):
        params = ParameterSet(seed=1)
        Dense(params, "fc", 3, 2)
        params.save(self.tmp / "p.vckp")
        other = ParameterSet(seed=2)
        Dense(other, "fc", 3, 2)
        other.load(self.tmp / "p.vckp")
        np.testing.assert_array_equal(other["fc.weight"].data, params["fc.weight"].data)
        wrong = ParameterSet()
        Dense(wrong, "fc", 4, 2)
        with self.assertRaises(FormatError):
            wrong.load(self.tmp / "p.vckp")

    def test_ppm_quantises_to_eight_bits(self):
        image = np.random.default_rng(0).uniform(size=(5, 7, 3))
        write_ppm(self.tmp / "i.ppm", image)
        loaded = read_ppm(self.tmp / "i.ppm")
        self.assertEqual(loaded.shape, (5, 7, 3))
        self.assertLessEqual(float(np.abs(loaded - image).max()), 0.5 / 255 + 1e-6)

    def test_frame_layout(self):
        payload = np.array([1 + 2j, -0.5 + 0j], dtype=np.complex64)
        side = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 1], dtype=np.uint8)
        level_index, side_bits, decoded = unpack_frame(pack_frame([0, 3, 1], side, payload))
        np.testing.assert_array_equal(level_index, [0, 3, 1])
        np.testing.assert_array_equal(side_bits, side)
        np.testing.assert_array_equal(decoded, payload)
        with self.assertRaises(FormatError):
            unpack_frame(pack_frame([0], side, payload)[:-3])

    def test_content_hash_matches_git(self):
        (self.tmp / "hello.txt").write_bytes(b"hello\n")
        self.assertEqual(content_hash(self.tmp / "hello.txt"), "ce013625030ba8dba906f756967f9e9ca394464a")

    def test_manifest(self):
        write_manifest(self.tmp / "m.json", {"seed": 3, "outputs": {"a": "b"}})
        self.assertEqual(read_manifest(self.tmp / "m.json")["seed"], 3)
        (self.tmp / "broken.json").write_text("{")
        with self.assertRaises(FormatError):
            read_manifest(self.tmp / "broken.json")
