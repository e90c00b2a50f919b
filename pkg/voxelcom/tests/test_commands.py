import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase

from voxelcom.management.base import CONFIG_ERROR, PREREQUISITE_MISSING
from voxelcom.models import MetricsRecord
from voxelcom.storage import read_csv, read_manifest, read_ppm

from .utils import slow

TINY_CONFIG = """
[scene]
kind = "sphere"
dims = [8, 8, 8]
image_size = 12
train_views = 2
test_views = 1
steps_per_ray = 8

[codec]
kind = "identity"
d_z = 4
hyper_hidden = 8

[jscc]
kind = "identity"
k_max = 128
q_levels = [0, 64, 128]

[channel]
snr_db = ["inf"]
snr_est_db = 10.0
train_snr_db = "inf"

[training]
t1 = 2
t2 = 1
t3 = 1
ray_batch = 32
grid_batch = 1
crop = 8
log_every = 1

[baseline]
codebook_size = 4
codebook_sizes = [2, 4]
kmeans_iters = 3
"""


class CommandTestCase(TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)
        self.out = Path(self._tmp.name)
        self.config = self.out / "tiny.toml"
        self.config.write_text(TINY_CONFIG)

    def call(self, name, *args, **options):
        stdout = StringIO()
        call_command(name, *args, config=str(self.config), out=str(self.out), stdout=stdout, **options)
        return stdout.getvalue()


class GenSceneCommandTest(CommandTestCase):
    def test_writes_scene_views_and_manifest(self):
        output = self.call("gen_scene")
        self.assertIn("scene sphere-0", output)
        self.assertTrue((self.out / "scene.vfg").exists())
        self.assertEqual(read_ppm(self.out / "images" / "train_000.ppm").shape, (12, 12, 3))
        manifest = read_manifest(self.out / "manifest_gen_scene.json")
        self.assertEqual(manifest["command"], "gen_scene")
        self.assertEqual(manifest["seed"], 0)
        self.assertIn("scene.vfg", manifest["outputs"])
        self.assertEqual(manifest["config"]["scene"]["dims"], [8, 8, 8])

    def test_seed_option_wins(self):
        self.call("gen_scene", seed=5)
        self.assertEqual(read_manifest(self.out / "manifest_gen_scene.json")["seed"], 5)

    def test_replay_reproduces_outputs(self):
        self.call("gen_scene")
        stdout = StringIO()
        call_command("replay", str(self.out / "manifest_gen_scene.json"), stdout=stdout)
        self.assertIn("reproduced bit-exactly", stdout.getvalue())


class CommandErrorTest(CommandTestCase):
    def test_bad_config_exits_with_config_error(self):
        self.config.write_text("[scene]\ndims = [8, 8, 6]\n")
        with self.assertRaises(CommandError) as caught:
            self.call("gen_scene")
        self.assertEqual(caught.exception.returncode, CONFIG_ERROR)

    def test_missing_prerequisite(self):
        with self.assertRaises(CommandError) as caught:
            self.call("fit")
        self.assertEqual(caught.exception.returncode, PREREQUISITE_MISSING)
        self.assertIn("gen_scene", str(caught.exception))

    def test_missing_manifest(self):
        with self.assertRaises(CommandError) as caught:
            call_command("replay", str(self.out / "manifest_fit.json"))
        self.assertEqual(caught.exception.returncode, PREREQUISITE_MISSING)

    def test_codebook_larger_than_the_scene(self):
        self.call("gen_scene")
        self.call("fit")
        self.config.write_text(TINY_CONFIG.replace("codebook_size = 4\n", "codebook_size = 64\n"))
        with self.assertRaises(CommandError) as caught:
            self.call("transmit", method="separation", stage=1)
        self.assertEqual(caught.exception.returncode, CONFIG_ERROR)
        self.assertIn("64-entry codebook", str(caught.exception))

    def test_bad_pose(self):
        self.call("gen_scene")
        with self.assertRaises(CommandError) as caught:
            self.call("render", checkpoint=str(self.out / "scene.vfg"), pose="0,0,0")
        self.assertEqual(caught.exception.returncode, CONFIG_ERROR)


class PipelineCommandTest(CommandTestCase):
    def test_three_stages_then_transmit(self):
        self.call("gen_scene")
        self.assertIn("test PSNR", self.call("fit"))
        self.assertIn("feature MSE", self.call("train_codec"))
        self.call("finetune")
        for name in ("grid_stage1.vckp", "system.vckp", "grid_stage3.vckp", "train_log_stage2.csv"):
            self.assertTrue((self.out / name).exists(), name)

        output = self.call("transmit", snr_true="inf", save_images=True)
        self.assertIn("jscc at inf dB", output)
        rows = read_csv(self.out / "transmit_jscc.csv")
        self.assertEqual(rows[0]["method"], "jscc")
        self.assertEqual(rows[0]["snr_true_db"], "inf")
        self.assertTrue((self.out / "frame.nfrm").exists())
        self.assertTrue((self.out / "received_jscc_002.ppm").exists())
        self.assertEqual(MetricsRecord.objects.filter(method="jscc").count(), 1)

    def test_render_from_arbitrary_position(self):
        self.call("gen_scene")
        self.call("render", checkpoint=str(self.out / "scene.vfg"), pose="1,1,0", image_size=16, output="side.ppm")
        self.assertEqual(read_ppm(self.out / "side.ppm").shape, (16, 16, 3))

    @slow
    def test_separation_transmit(self):
        self.call("gen_scene")
        self.call("fit")
        output = self.call("transmit", method="separation", stage=1, snr_true="12")
        self.assertIn("separation at 12.0 dB", output)
        self.assertEqual(MetricsRecord.objects.filter(method="separation").count(), 1)
