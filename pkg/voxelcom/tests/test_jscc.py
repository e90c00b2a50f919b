import math

import numpy as np
from django.test import SimpleTestCase

from voxelcom import numcore as nc
from voxelcom.codec import CodecConfig, RateReport
from voxelcom.exceptions import FrameError, ShapeError
from voxelcom.jscc import (
    BandwidthAllocation,
    JsccCodec,
    JsccConfig,
    SideInfo,
    allocate,
    allocate_full,
    allocation_for,
    allocation_heat,
    compute_cbr,
    frame_cbr,
    jscc_decode,
    jscc_encode,
    level_bits,
    parse_frame,
    serialize_frame,
    transmit_tensor,
    tune_eta,
)

from voxelcom.pipeline import JsccSystem
from voxelcom.scene import generate_scene, voxel_centers
from voxelcom.training import TrainingSchedule, stage2_train_codec

from .utils import identity_codec, identity_jscc, slow, small_grid

LEVELS = (0, 2, 4, 8, 16, 32)


class AllocationTest(SimpleTestCase):
    def test_nearest_level(self):
        alloc = allocate(np.array([0.0, 9.0, 31.0, 100.0, 500.0]), 0.2, LEVELS)
        np.testing.assert_array_equal(alloc.k_bar, [0, 2, 8, 16, 32])

    def test_ties_go_to_the_larger_level(self):
        # 0.5 * 6 = 3 is equally near 2 and 4
        alloc = allocate(np.array([6.0, 12.0]), 0.5, LEVELS)
        np.testing.assert_array_equal(alloc.k_bar, [4, 8])

    def test_monotone_in_rate(self):
        rng = np.random.default_rng(0)
        violations = 0
        for _ in range(1000):
            report = RateReport.from_bits(np.sort(rng.uniform(0, 400, size=int(rng.integers(1, 200)))))
            alloc = allocate(report, float(rng.uniform(0.01, 1.0)), LEVELS)
            violations += int(np.any(np.diff(alloc.k_bar) < 0))
        self.assertEqual(violations, 0)

    def test_monotone_in_eta(self):
        rates = np.random.default_rng(1).uniform(0, 200, size=64)
        previous = allocate(rates, 0.01, LEVELS).n_payload
        for eta in (0.05, 0.1, 0.5, 1.0, 5.0):
            current = allocate(rates, eta, LEVELS).n_payload
            self.assertGreaterEqual(current, previous)
            previous = current

    def test_zero_level_always_available(self):
        alloc = allocate(np.array([0.1]), 1.0, (4, 8))
        self.assertEqual(alloc.q_levels, (0, 4, 8))
        self.assertEqual(int(alloc.k_bar[0]), 0)

    def test_accepts_rate_report(self):
        report = RateReport.from_bits([10.0, 80.0])
        np.testing.assert_array_equal(allocate(report, 0.2, LEVELS).k_bar, [2, 16])

    def test_rejects_bad_eta_and_levels(self):
        with self.assertRaises(ValueError):
            allocate(np.ones(3), 0.0, LEVELS)
        with self.assertRaises(ValueError):
            allocate(np.ones(3), -1.0, LEVELS)
        with self.assertRaises(ValueError):
            allocate(np.ones(3), 1.0, ())

    def test_full_allocation(self):
        alloc = allocate_full(5, 32, LEVELS)
        self.assertEqual(alloc.n_payload, 160)
        np.testing.assert_array_equal(alloc.level_index, [5] * 5)

    def test_allocation_for_config(self):
        rates = np.array([10.0, 80.0])
        self.assertEqual(allocation_for(JsccConfig(allocation="full"), rates).n_payload, 64)
        np.testing.assert_array_equal(allocation_for(JsccConfig(eta=0.2), rates).k_bar, [2, 16])
        np.testing.assert_array_equal(allocation_for(JsccConfig(eta=0.2), rates, eta=0.05).k_bar, [0, 4])

    def test_level_index_round_trip(self):
        alloc = BandwidthAllocation([0, 4, 32, 2], 0.1, LEVELS)
        again = BandwidthAllocation.from_level_index(alloc.level_index, LEVELS)
        np.testing.assert_array_equal(again.k_bar, alloc.k_bar)

    def test_rejects_unknown_levels(self):
        with self.assertRaises(ValueError):
            BandwidthAllocation([3], 0.1, LEVELS)

    def test_heat_rows_follow_patch_order(self):
        rows = allocation_heat((1, 2, 2), BandwidthAllocation([0, 2, 4, 8], 0.1, LEVELS))
        self.assertEqual(rows[3], {"d": 0, "r": 1, "c": 1, "k_bar": 8})
        self.assertEqual(len(rows), 4)

    def test_cbr(self):
        self.assertEqual(compute_cbr(64, 256), 0.25)
        with self.assertRaises(ValueError):
            compute_cbr(1, 0)

    def test_level_bits(self):
        self.assertEqual(level_bits(2), 1)
        self.assertEqual(level_bits(6), 3)
        self.assertEqual(level_bits(8), 3)


class TuneEtaTest(SimpleTestCase):
    def test_reaches_a_reachable_target(self):
        rates = np.random.default_rng(2).uniform(20, 200, size=64)
        m = 16384
        eta = tune_eta(rates, m, 0.05, LEVELS, d_z=4)
        alloc = allocate(rates, eta, LEVELS)
        side = SideInfo.bit_length(alloc.level_index, 4, len(LEVELS))
        achieved = compute_cbr(alloc.n_payload + side, m)
        # one patch changing level moves the CBR by a few symbols at most
        self.assertLess(abs(achieved - 0.05), 40 / m)

    def test_unreachable_target_clamps_to_full(self):
        rates = np.full(8, 100.0)
        eta = tune_eta(rates, 1024, 10.0, LEVELS, d_z=4)
        np.testing.assert_array_equal(allocate(rates, eta, LEVELS).k_bar, [32] * 8)


class SideInfoTest(SimpleTestCase):
    def make(self, level_index):
        return SideInfo(np.array([-3, 0, 5, 127]), 1.7, level_index)

    def test_dense_table_round_trip(self):
        side = self.make(np.array([1, 2, 3, 4, 5, 0, 1, 2]))
        bits = side.to_bits(6)
        self.assertEqual(bits[0], 0)
        self.assertEqual(len(bits), SideInfo.bit_length(side.level_index, 4, 6))
        self.assertEqual(len(bits) % 8, 0)
        again = SideInfo.from_bits(bits, 8, 4, 6)
        np.testing.assert_array_equal(again.z, side.z)
        np.testing.assert_array_equal(again.level_index, side.level_index)
        self.assertEqual(again.gain, side.gain)

    def test_sparse_table_for_mostly_silent_frames(self):
        level_index = np.zeros(64, dtype=np.uint8)
        level_index[[3, 40]] = [5, 1]
        side = self.make(level_index)
        bits = side.to_bits(6)
        self.assertEqual(bits[0], 1)
        self.assertLess(len(bits), 1 + 32 + 16 + 64 * 3 + 16)
        np.testing.assert_array_equal(SideInfo.from_bits(bits, 64, 4, 6).level_index, level_index)

    def test_gain_is_stored_in_half_precision(self):
        self.assertEqual(self.make([0]).gain, float(np.float16(1.7)))

    def test_corrupted_bit_fails_crc(self):
        bits = self.make(np.array([1, 2, 3])).to_bits(6)
        for position in (0, 5, len(bits) - 1):
            flipped = bits.copy()
            flipped[position] ^= 1
            with self.subTest(position=position), self.assertRaises(FrameError):
                SideInfo.from_bits(flipped, 3, 4, 6)

    def test_truncated_bits(self):
        with self.assertRaises(FrameError):
            SideInfo.from_bits(np.zeros(12, dtype=np.uint8), 3, 4, 6)


class FrameTest(SimpleTestCase):
    def setUp(self):
        self.codec = identity_codec()
        self.jscc = identity_jscc()
        self.grid = small_grid("spheres", 1)
        self.patches = self.codec.analysis(self.grid)
        self.prior = self.codec.hyperprior(self.patches)
        self.alloc = BandwidthAllocation([128, 0, 64, 0, 32, 128, 0, 64], 0.1, self.jscc.levels)
        self.frame = jscc_encode(self.patches, self.alloc, self.jscc, self.prior.z.data[0])

    def test_payload_has_unit_power(self):
        self.assertEqual(self.frame.n_payload, self.alloc.n_payload)
        power = float(np.mean(np.abs(self.frame.payload) ** 2))
        self.assertAlmostEqual(power, 1.0, delta=2e-3)

    def test_cbr_counts_payload_and_side_symbols(self):
        m = self.grid.m
        expected = (self.alloc.n_payload + len(self.frame.side_bits)) / m
        self.assertAlmostEqual(self.frame.cbr(m), expected)
        self.assertAlmostEqual(frame_cbr(serialize_frame(self.frame), m), self.frame.cbr(m))

    def test_serialized_frame_parses_back(self):
        parsed = parse_frame(serialize_frame(self.frame), 4, self.jscc.levels)
        np.testing.assert_array_equal(parsed.alloc.k_bar, self.alloc.k_bar)
        np.testing.assert_allclose(parsed.payload, self.frame.payload)

    def test_noiseless_decode(self):
        decoded = jscc_decode(self.frame, self.jscc, self.codec, self.patches.lattice).values.data[0]
        original = self.patches.values.data[0]
        granted = self.alloc.k_bar == 128
        np.testing.assert_allclose(decoded[granted], original[granted], atol=1e-3)

    def test_silent_patches_decode_to_the_prior_mean(self):
        decoded = jscc_decode(self.frame, self.jscc, self.codec, self.patches.lattice).values.data[0]
        mu = self.prior.mu.data[0]
        for patch in np.flatnonzero(self.alloc.k_bar == 0):
            np.testing.assert_array_equal(decoded[patch], mu[patch])

    def test_payload_length_mismatch(self):
        short = self.frame.received(self.frame.payload[:-1], self.frame.side_bits)
        with self.assertRaises(FrameError):
            jscc_decode(short, self.jscc, self.codec, self.patches.lattice)

    def test_corrupted_side_information(self):
        side = self.frame.side_bits.copy()
        side[10] ^= 1
        with self.assertRaises(FrameError):
            jscc_decode(self.frame.received(self.frame.payload, side), self.jscc, self.codec, self.patches.lattice)

    def test_allocation_must_cover_every_patch(self):
        with self.assertRaises(ShapeError):
            jscc_encode(self.patches, BandwidthAllocation([32], 0.1, self.jscc.levels), self.jscc, self.prior.z.data[0])

    def test_all_silent_frame(self):
        silent = BandwidthAllocation(np.zeros(8), 0.1, self.jscc.levels)
        frame = jscc_encode(self.patches, silent, self.jscc, self.prior.z.data[0])
        self.assertEqual(frame.n_payload, 0)
        self.assertEqual(frame.side_info.gain, 1.0)


class JsccCodecTest(SimpleTestCase):
    def test_dense_heads_shapes(self):
        jscc = JsccCodec(JsccConfig(k_max=8, q_levels=(0, 2, 4, 8), hidden=16), d_v=12)
        v = nc.Tensor(np.random.default_rng(0).normal(size=(1, 5, 12)))
        x = jscc.encode_reals(v)
        self.assertEqual(x.shape, (1, 5, 16))
        self.assertEqual(jscc.decode_reals(x, np.zeros((1, 5), dtype=int)).shape, (1, 5, 12))

    def test_mask_rejects_more_than_k_max(self):
        jscc = JsccCodec(JsccConfig(k_max=8, q_levels=(0, 8)), d_v=4)
        np.testing.assert_array_equal(jscc.real_mask(np.array([0, 2]))[1], [1] * 4 + [0] * 12)
        with self.assertRaises(ValueError):
            jscc.real_mask(np.array([9]))

    def test_identity_needs_room_for_the_latent(self):
        with self.assertRaises(ShapeError):
            JsccCodec(JsccConfig(kind="identity", k_max=8, q_levels=(0, 8)), d_v=32)

    def test_training_path_keeps_silent_patches_at_mu(self):
        jscc = JsccCodec(JsccConfig(k_max=8, q_levels=(0, 4, 8), hidden=16), d_v=6)
        rng = np.random.default_rng(3)
        v = nc.Tensor(rng.normal(size=(2, 3, 6)))
        mu = nc.Tensor(rng.normal(size=(2, 1, 6)))
        k_bar = np.array([[0, 4, 8], [8, 0, 0]])
        v_hat = transmit_tensor(jscc, v, mu, k_bar, 0.1, np.random.default_rng(4))
        self.assertEqual(v_hat.shape, (2, 3, 6))
        np.testing.assert_allclose(v_hat.data[0, 0], mu.data[0, 0], rtol=1e-6)
        np.testing.assert_allclose(v_hat.data[1, 2], mu.data[1, 0], rtol=1e-6)

    def test_training_path_is_exact_without_noise(self):
        jscc = identity_jscc(levels=(0, 8), k_max=8, d_v=16)
        v = nc.Tensor(np.random.default_rng(5).normal(size=(1, 2, 16)))
        v_hat = transmit_tensor(jscc, v, nc.Tensor(np.zeros((1, 1, 16))), np.array([[8, 8]]), 0.0, np.random.default_rng(0))
        np.testing.assert_allclose(v_hat.data, v.data, atol=1e-5)

    def test_gradients_flow_through_the_channel(self):
        jscc = JsccCodec(JsccConfig(k_max=4, q_levels=(0, 2, 4), hidden=8), d_v=3)
        v = nc.Tensor(np.random.default_rng(6).normal(size=(1, 2, 3)))
        v_hat = transmit_tensor(jscc, v, nc.Tensor(np.zeros((1, 1, 3))), np.array([[2, 4]]), 0.1, np.random.default_rng(7))
        grads = jscc.params.gradients(nc.backward(nc.mse(v_hat, v)))
        self.assertTrue(np.any(grads["jscc.fe.fc1.weight"] != 0))
        self.assertTrue(np.any(grads["jscc.fd.out.weight"] != 0))
        self.assertTrue(math.isfinite(float(np.abs(grads["jscc.fe.out.weight"]).sum())))


class TargetCbrTest(SimpleTestCase):
    def test_tiny_target_on_a_full_size_grid(self):
        grid, _ = generate_scene("spheres", 0)
        frame, _, _ = JsccSystem(CodecConfig(), JsccConfig()).encode(grid, target_cbr=0.0015)
        cbr = frame.cbr(grid.m)
        self.assertAlmostEqual(cbr, 0.0015, delta=0.1 * 0.0015)
        self.assertAlmostEqual(frame_cbr(serialize_frame(frame), grid.m), cbr)


def occupied_patches(shape, dims, patch=4):
    inside = shape.occupied(voxel_centers(dims))
    lattice = [d // patch for d in dims]
    blocks = inside.reshape(lattice[0], patch, lattice[1], patch, lattice[2], patch).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(-1, patch**3).any(axis=1)


class ContentAwareAllocationTest(SimpleTestCase):
    @slow
    def test_occupied_patches_get_more_symbols(self):
        for seed in range(5):
            grid, shape = generate_scene("sphere", seed, dims=(16, 16, 16))
            system = JsccSystem(
                CodecConfig(widths=(8, 16), d_v=16, d_z=8, hyper_hidden=16, seed=seed),
                JsccConfig(q_levels=(0, 2, 4, 8, 16), k_max=16, hidden=32, seed=seed),
            )
            schedule = TrainingSchedule(t2=150, lr_codec=3e-3, grid_batch=1, crop=16, lam=1e-2, seed=seed, log_every=150)
            stage2_train_codec(grid, schedule, system.codec, system.jscc, system.jscc_config)
            patches = system.codec.analysis(grid)
            rates = system.codec.rate_report(patches, system.codec.hyperprior(patches))
            # the median patch lands near 8 symbols
            eta = 8.0 / float(np.median(rates.per_patch_bits))
            k_bar = allocate(rates, eta, system.jscc_config.levels).k_bar
            occupied = occupied_patches(shape, grid.dims)
            with self.subTest(seed=seed):
                self.assertEqual(int(occupied.sum()), 8)
                self.assertGreater(np.median(k_bar[occupied]), np.median(k_bar[~occupied]))
