import math
import struct

import numpy as np
from django.test import SimpleTestCase

from voxelcom.baseline import (
    HEADER,
    VqCodebook,
    bitstream_bits,
    deserialize_digital,
    grid_patches,
    patches_to_grid,
    quantization_mse,
    run_separation,
    serialize_digital,
    vq_apply,
    vq_reconstruct,
    vq_train,
)
from voxelcom.channel import DEFAULT_MCS_ROWS, McsTable
from voxelcom.exceptions import FormatError, FrameError, ShapeError

from .utils import slow, small_grid


def blobs(seed=0, per_blob=50):
    rng = np.random.default_rng(seed)
    means = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    samples = np.concatenate([mean + 0.1 * rng.standard_normal((per_blob, 2)) for mean in means])
    return samples, means


class VqTrainTest(SimpleTestCase):
    def test_one_centroid_per_sample_is_lossless(self):
        samples = np.random.default_rng(0).permutation(36).reshape(12, 3).astype(np.float64)
        codebook = vq_train(samples, 12, iters=5)
        self.assertEqual(quantization_mse(samples, codebook), 0.0)
        self.assertEqual(codebook.mse_history[0], 0.0)

    def test_finds_separated_clusters(self):
        samples, means = blobs()
        codebook = vq_train(samples, 3, iters=20, seed=1)
        found = sorted(map(tuple, np.round(codebook.vectors).tolist()))
        self.assertEqual(found, sorted(map(tuple, means.tolist())))
        self.assertLess(quantization_mse(samples, codebook), 0.05)

    def test_distortion_never_increases(self):
        samples = np.random.default_rng(2).normal(size=(300, 4))
        codebook = vq_train(samples, 16, iters=15, seed=3, scene_id="noise")
        history = np.array(codebook.mse_history)
        self.assertTrue(np.all(np.diff(history) <= 1e-12))
        self.assertEqual(codebook.scene_id, "noise")

    def test_same_seed_same_codebook(self):
        samples = np.random.default_rng(4).normal(size=(100, 2))
        first = vq_train(samples, 8, seed=5)
        np.testing.assert_array_equal(first.vectors, vq_train(samples, 8, seed=5).vectors)

    def test_needs_enough_samples(self):
        with self.assertRaises(ValueError):
            vq_train(np.zeros((3, 2)), 4)


class VqApplyTest(SimpleTestCase):
    def setUp(self):
        self.codebook = VqCodebook(np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [5.0, 5.0]]))

    def test_nearest_centroid_with_lowest_index_on_ties(self):
        indices = vq_apply(np.array([[0.1, -0.1], [0.9, 1.2], [4.0, 4.0]]), self.codebook)
        np.testing.assert_array_equal(indices, [0, 1, 3])

    def test_reconstruct(self):
        np.testing.assert_array_equal(vq_reconstruct([3, 0], self.codebook), [[5.0, 5.0], [0.0, 0.0]])
        with self.assertRaises(IndexError):
            vq_reconstruct([4], self.codebook)

    def test_rejects_mismatched_dimension(self):
        with self.assertRaises(ShapeError):
            vq_apply(np.zeros((2, 3)), self.codebook)

    def test_index_bits(self):
        self.assertEqual(VqCodebook(np.zeros((1, 2))).index_bits, 1)
        self.assertEqual(VqCodebook(np.zeros((5, 2))).index_bits, 3)
        self.assertEqual(VqCodebook(np.zeros((256, 2))).index_bits, 8)

    def test_rejects_non_finite_centroids(self):
        with self.assertRaises(ValueError):
            VqCodebook(np.array([[np.inf, 0.0]]))


class BitstreamTest(SimpleTestCase):
    def setUp(self):
        self.codebook = VqCodebook(np.arange(10, dtype=np.float32).reshape(5, 2))
        self.indices = np.array([0, 4, 2, 3, 1, 4, 0])

    def test_round_trip(self):
        blob = serialize_digital(self.indices, self.codebook)
        self.assertEqual(len(blob), HEADER.size + 2 + 5 * 2 * 4 + math.ceil(7 * 3 / 8))
        self.assertEqual(len(bitstream_bits(blob)), 8 * len(blob))
        indices, vectors = deserialize_digital(blob)
        np.testing.assert_array_equal(indices, self.indices)
        np.testing.assert_array_equal(vectors, self.codebook.vectors)

    def test_header_corruption_is_detected(self):
        blob = bytearray(serialize_digital(self.indices, self.codebook))
        blob[6] ^= 0x01
        with self.assertRaises(FrameError):
            deserialize_digital(bytes(blob))

    def test_corrupted_float_is_bounded(self):
        blob = bytearray(serialize_digital(self.indices, self.codebook))
        body = HEADER.size + 2
        blob[body : body + 4] = struct.pack("<f", float("nan"))
        blob[body + 4 : body + 8] = struct.pack("<f", 3e38)
        _, vectors = deserialize_digital(bytes(blob))
        self.assertEqual(vectors[0, 0], 0.0)
        self.assertEqual(vectors[0, 1], 1e4)

    def test_out_of_range_index_wraps(self):
        blob = bytearray(serialize_digital(np.array([0]), self.codebook))
        # the only index sits in the top three bits of the last byte
        blob[-1] = 0b11100000
        indices, _ = deserialize_digital(bytes(blob))
        self.assertEqual(int(indices[0]), 7 % 5)

    def test_truncated_body(self):
        blob = serialize_digital(self.indices, self.codebook)
        with self.assertRaises(FormatError):
            deserialize_digital(blob[:-6])
        with self.assertRaises(FormatError):
            deserialize_digital(blob[:4])

    def test_rejects_out_of_range_index(self):
        with self.assertRaises(IndexError):
            serialize_digital(np.array([5]), self.codebook)


class PatchTest(SimpleTestCase):
    def test_grid_patches_round_trip(self):
        grid = small_grid("boxes", 2)
        samples, lattice = grid_patches(grid, 4)
        self.assertEqual(samples.shape, (8, 4 * 4 * 4 * 4))
        self.assertEqual(lattice, (2, 2, 2))
        rebuilt = patches_to_grid(samples, lattice, 4, grid.bbox)
        np.testing.assert_array_equal(rebuilt.values.data, grid.values.data)

    def test_rejects_indivisible_grid(self):
        with self.assertRaises(ShapeError):
            grid_patches(small_grid(), 3)


class SeparationTest(SimpleTestCase):
    def setUp(self):
        self.grid = small_grid("spheres", 0)
        samples, _ = grid_patches(self.grid, 4)
        self.codebook = VqCodebook(samples)
        self.table = McsTable.from_rows(DEFAULT_MCS_ROWS)

    @slow
    def test_noiseless_link_returns_the_quantised_grid(self):
        outcome = run_separation(self.grid, self.codebook, self.table, 10.0, math.inf)
        self.assertTrue(outcome.decoded)
        self.assertEqual(outcome.bit_errors, 0)
        np.testing.assert_array_equal(outcome.grid.values.data, self.grid.values.data)
        self.assertEqual(outcome.entry.describe(), "QAM16 r=2/3")
        self.assertGreater(outcome.cbr, 0)

    @slow
    def test_deep_fade_loses_the_grid(self):
        outcome = run_separation(self.grid, self.codebook, self.table, 10.0, -10.0)
        self.assertGreater(outcome.bit_errors, 0)
        if not outcome.decoded:
            self.assertFalse(np.any(outcome.grid.values.data))
