import math
import tempfile
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, TestCase

from voxelcom.exceptions import ShapeError
from voxelcom.metrics import PSNR_CAP, RD_FIELDS, aggregate, psnr, psnr_of_views, record, ssim, view_scores, write_rd_csv
from voxelcom.models import MetricsRecord
from voxelcom.storage import read_csv


def random_image(seed=0, size=24):
    return np.random.default_rng(seed).uniform(size=(size, size, 3))


class PsnrTest(SimpleTestCase):
    def test_identical_images_hit_the_cap(self):
        image = random_image()
        self.assertEqual(psnr(image, image), PSNR_CAP)

    def test_known_error(self):
        a = np.zeros((4, 4, 3))
        self.assertAlmostEqual(psnr(a, a + 0.1), 20.0)
        self.assertAlmostEqual(psnr(a, a + 0.01), 40.0)

    def test_floor_at_zero(self):
        self.assertEqual(psnr(np.zeros((2, 2)), np.full((2, 2), 3.0)), 0.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 1)))


class SsimTest(SimpleTestCase):
    def test_identical_images(self):
        image = random_image(1)
        self.assertAlmostEqual(ssim(image, image), 1.0)

    def test_inverted_image_is_anticorrelated(self):
        image = random_image(2)
        self.assertLess(ssim(image, 1.0 - image), 0.0)

    def test_symmetric(self):
        a, b = random_image(3), random_image(4)
        self.assertAlmostEqual(ssim(a, b), ssim(b, a))

    def test_noise_lowers_structure(self):
        image = random_image(5)
        noisy = np.clip(image + 0.2 * np.random.default_rng(6).standard_normal(image.shape), 0, 1)
        self.assertLess(ssim(image, noisy), ssim(image, image))

    def test_grayscale(self):
        image = random_image(7)[..., 0]
        self.assertAlmostEqual(ssim(image, image), 1.0)

    def test_needs_a_full_window(self):
        with self.assertRaises(ValueError):
            ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))

    def test_view_averages(self):
        images = [random_image(8), random_image(9)]
        mean_psnr, mean_ssim = psnr_of_views(images, images)
        self.assertEqual(mean_psnr, PSNR_CAP)
        self.assertAlmostEqual(mean_ssim, 1.0)
        with self.assertRaises(ValueError):
            psnr_of_views(images, images[:1])

    def test_per_view_scores(self):
        clean = random_image(10)
        scores = view_scores([clean, np.zeros_like(clean)], [clean, clean])
        self.assertEqual(scores[0][0], PSNR_CAP)
        self.assertLess(scores[1][0], scores[0][0])
        self.assertEqual(len(scores), 2)


class MetricsRecordTest(TestCase):
    def test_record_is_validated(self):
        entry = record("spheres-0", "jscc", 7.0, 10.0, 0.05, 31.5, 0.9, seed=3)
        self.assertEqual(entry.snr_label, "7 dB")
        self.assertIsNone(entry.pk)
        with self.assertRaises(ValidationError):
            record("spheres-0", "analog", 7.0, 10.0, 0.05, 31.5, 0.9)
        with self.assertRaises(ValidationError):
            record("spheres-0", "jscc", 7.0, 10.0, 0.05, 120.0, 0.9)
        with self.assertRaises(ValidationError):
            record("spheres-0", "jscc", 7.0, 10.0, -0.1, 31.5, 0.9)

    def test_noiseless_snr_is_stored_as_null(self):
        entry = record("sphere-0", "separation", math.inf, math.inf, 0.4, 40.0, 0.95)
        entry.save()
        stored = MetricsRecord.objects.get(pk=entry.pk)
        self.assertIsNone(stored.snr_true_db)
        self.assertEqual(stored.as_row()["snr_true_db"], "inf")
        self.assertEqual(str(stored), "sphere-0 separation @ inf: 40.00 dB")

    def test_default_ordering(self):
        MetricsRecord.objects.bulk_create(
            [
                record("s", "separation", 6.0, 10.0, 0.3, 20.0, 0.5),
                record("s", "jscc", 6.0, 10.0, 0.2, 25.0, 0.6),
                record("s", "jscc", 6.0, 10.0, 0.1, 22.0, 0.55),
            ]
        )
        stored = [(r.method, r.cbr) for r in MetricsRecord.objects.all()]
        self.assertEqual(stored, [("jscc", 0.1), ("jscc", 0.2), ("separation", 0.3)])


class AggregateTest(TestCase):
    def setUp(self):
        self.records = [
            record("s", "jscc", 10.0, 10.0, 0.08, 28.0, 0.8),
            record("s", "separation", 10.0, 10.0, 0.5, 27.0, 0.79),
            record("s", "jscc", 10.0, 10.0, 0.02, 24.0, 0.7),
            record("s", "jscc", math.inf, 10.0, 0.05, 30.0, 0.85),
            record("s", "jscc", 6.0, 10.0, 0.05, 21.0, 0.6),
        ]

    def test_groups_by_method_and_snr_then_cbr(self):
        rows = aggregate(self.records)
        keys = [(row["method"], row["snr_true_db"], row["cbr"]) for row in rows]
        self.assertEqual(
            keys,
            [
                ("jscc", 6.0, 0.05),
                ("jscc", 10.0, 0.02),
                ("jscc", 10.0, 0.08),
                ("jscc", "inf", 0.05),
                ("separation", 10.0, 0.5),
            ],
        )

    def test_csv_has_the_rd_columns(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "rd.csv"
            write_rd_csv(path, aggregate(self.records))
            rows = read_csv(path)
        self.assertEqual(tuple(rows[0].keys()), RD_FIELDS)
        self.assertEqual(len(rows), 5)
        self.assertEqual(rows[3]["snr_true_db"], "inf")
