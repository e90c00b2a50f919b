import math
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from voxelcom.baseline import VqCodebook, grid_patches, vq_train
from voxelcom.channel import DEFAULT_MCS_ROWS, McsTable
from voxelcom.codec import CodecConfig
from voxelcom.config import build_config
from voxelcom.jscc import JsccConfig
from voxelcom.metrics import PSNR_CAP
from voxelcom.pipeline import (
    ExperimentSettings,
    JsccSystem,
    MatchedRate,
    degradation_experiment,
    evaluate_grid,
    matched_eta,
)
from voxelcom.scene import generate_scene, make_dataset
from voxelcom.training import TrainingSchedule, stage2_train_codec

from .utils import slow, small_grid

IDENTITY_CODEC = CodecConfig(kind="identity", channels=4, d_z=4, hyper_hidden=8)


def identity_system(allocation="full"):
    return JsccSystem(IDENTITY_CODEC, JsccConfig(kind="identity", q_levels=(0, 64, 128), k_max=128, allocation=allocation))


class JsccSystemTest(SimpleTestCase):
    def setUp(self):
        self.grid = small_grid("spheres", 2)

    def test_noiseless_full_allocation_returns_the_grid(self):
        outcome = identity_system().run(self.grid, math.inf)
        self.assertTrue(outcome.decoded)
        np.testing.assert_allclose(outcome.grid.values.data, self.grid.values.data, atol=1e-3)
        self.assertEqual(outcome.cbr, outcome.frame.cbr(self.grid.m))
        self.assertEqual(outcome.grid.bbox, self.grid.bbox)

    def test_same_seed_same_received_grid(self):
        system = identity_system()
        first = system.run(self.grid, 5.0, seed=4).grid.values.data
        np.testing.assert_array_equal(first, system.run(self.grid, 5.0, seed=4).grid.values.data)

    def test_target_cbr_shrinks_the_frame(self):
        system = identity_system("entropy")
        full, _, _ = identity_system().encode(self.grid)
        tuned, _, _ = system.encode(self.grid, target_cbr=full.cbr(self.grid.m) / 2)
        self.assertLess(tuned.cbr(self.grid.m), full.cbr(self.grid.m))

    def test_checkpoint_round_trip(self):
        codec = CodecConfig(widths=(4, 8), d_v=16, d_z=4, hyper_hidden=8)
        jscc = JsccConfig(q_levels=(0, 4, 8), k_max=8, hidden=16)
        system = JsccSystem(codec, jscc)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "system.vckp"
            system.save(path)
            loaded = JsccSystem(CodecConfig(widths=(4, 8), d_v=16, d_z=4, hyper_hidden=8, seed=9), jscc).load(path)
        for name, tensor in system.codec.params.items():
            np.testing.assert_array_equal(loaded.codec.params[name].data, tensor.data)
        np.testing.assert_array_equal(loaded.jscc.params["jscc.fd.out.weight"].data, system.jscc.params["jscc.fd.out.weight"].data)
        self.assertFalse(any(t.requires_grad for t in loaded.codec.params.values()))


class EvaluateGridTest(SimpleTestCase):
    def test_ground_truth_grid_scores_the_cap(self):
        grid = small_grid("sphere")
        dataset = make_dataset(grid, "sphere-0", train_views=1, test_views=2, image_size=12, steps=8)
        mean_psnr, mean_ssim, images = evaluate_grid(grid, dataset.test_views, 8)
        self.assertEqual(mean_psnr, PSNR_CAP)
        self.assertAlmostEqual(mean_ssim, 1.0, places=5)
        self.assertEqual(len(images), 2)


class DegradationExperimentTest(SimpleTestCase):
    @slow
    def test_records_come_back_in_sweep_order(self):
        grid = small_grid("spheres", 3)
        dataset = make_dataset(grid, "spheres-3", train_views=1, test_views=1, image_size=12, steps=8)
        samples, _ = grid_patches(grid, 4)
        codebook = VqCodebook(samples[:4])
        settings = ExperimentSettings(snr_true_grid=(10.0, 6.0), snr_est_db=10.0, steps=8, scene_id="spheres-3")
        table = McsTable.from_rows(DEFAULT_MCS_ROWS)
        with ThreadPoolExecutor(max_workers=2) as pool:
            records = degradation_experiment(grid, identity_system("entropy"), dataset.test_views, codebook, table, settings, pool)
        self.assertEqual([(r.method, r.snr_true_db) for r in records], [
            ("jscc", 10.0), ("separation", 10.0), ("jscc", 6.0), ("separation", 6.0),
        ])
        self.assertTrue(all(r.snr_est_db == 10.0 for r in records))


class MatchedRateTest(SimpleTestCase):
    def setUp(self):
        self.config = build_config({})
        scene = self.config.scene
        self.grid, _ = generate_scene("spheres", 0, dims=scene.dims, channels=scene.channels)
        self.system = JsccSystem(self.config.codec, self.config.jscc)

    def matched(self, codebook_size, patch, iters=5):
        codebook = vq_train(grid_patches(self.grid, patch)[0], codebook_size, iters, seed=0)
        settings = ExperimentSettings(snr_true_grid=(10.0,), snr_est_db=10.0, steps=8, patch=patch)
        return matched_eta(self.grid, self.system, codebook, self.config.baseline.table, settings)

    def test_default_sweep_codebook_is_matched(self):
        baseline = self.config.baseline
        rate = self.matched(baseline.matched_codebook_size, baseline.matched_patch)
        self.assertTrue(rate.matched, rate)
        self.assertAlmostEqual(rate.jscc_cbr, rate.separation_cbr, delta=0.1 * rate.separation_cbr)
        self.assertEqual(rate.label, "matched CBR")

    def test_unreachable_separation_rate_is_flagged(self):
        with self.assertLogs("voxelcom.pipeline", "WARNING") as logs:
            rate = self.matched(256, 4, iters=2)
        self.assertFalse(rate.matched)
        self.assertTrue(rate.label.startswith("CBR mismatch"))
        self.assertIn("cannot reach", logs.output[0])

    def test_label(self):
        self.assertEqual(MatchedRate(0.1, 0.1, 0.105).label, "matched CBR")
        self.assertEqual(MatchedRate(0.1, 2.0, 0.14).label, "CBR mismatch 93% (separation 2)")


class DegradationShapeTest(SimpleTestCase):
    @slow
    def test_separation_falls_off_a_cliff_while_jscc_degrades(self):
        config = build_config({})
        grid, _ = generate_scene("spheres", 0)
        dataset = make_dataset(grid, "spheres-0", train_views=1, test_views=4, image_size=16, steps=32)
        system = JsccSystem(config.codec, config.jscc)
        schedule = TrainingSchedule(t2=300, lr_codec=3e-3, grid_batch=2, crop=16, log_every=300, train_snr_db=10.0)
        stage2_train_codec(grid, schedule, system.codec, system.jscc, system.jscc_config)
        baseline = config.baseline
        codebook = vq_train(grid_patches(grid, baseline.matched_patch)[0], baseline.matched_codebook_size, 10, seed=0)
        settings = ExperimentSettings(snr_true_grid=(10.0, 8.0, 6.0), snr_est_db=10.0, steps=32, patch=baseline.matched_patch)
        records = degradation_experiment(grid, system, dataset.test_views, codebook, baseline.table, settings)
        self.assertTrue(all(r.label == "matched CBR" for r in records))
        scores = {(r.method, r.snr_true_db): r.psnr_db for r in records}
        for snr in (8.0, 6.0):
            with self.subTest(snr=snr):
                jscc_drop = scores["jscc", 10.0] - scores["jscc", snr]
                separation_drop = scores["separation", 10.0] - scores["separation", snr]
                self.assertGreater(separation_drop, jscc_drop)
        self.assertLess(scores["separation", 6.0], scores["jscc", 6.0])
