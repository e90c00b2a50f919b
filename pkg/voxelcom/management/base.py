"""Shared plumbing for the experiment commands: options, exit codes, prerequisites, manifests."""
import logging
import math
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.exceptions import ImproperlyConfigured, ValidationError
from django.core.management.base import BaseCommand, CommandError
from django.db import DatabaseError

from ..config import config_to_dict, load_config
from ..exceptions import FormatError, NumericError, PrerequisiteError
from ..pipeline import JsccSystem, evaluate_grid
from ..scene import SceneDataset, View, VoxelFeatureGrid
from ..storage import content_hash, read_checkpoint, read_ppm, read_views, write_checkpoint, write_manifest

logger = logging.getLogger(__name__)

CONFIG_ERROR = 2
PREREQUISITE_MISSING = 3
NUMERIC_FAILURE = 4

SCENE_FILE = "scene.vfg"
VIEWS_FILE = "views.json"
IMAGE_DIR = "images"
STAGE1_GRID = "grid_stage1.vckp"
SYSTEM_FILE = "system.vckp"
STAGE3_GRID = "grid_stage3.vckp"


def parse_snr(value):
    text = str(value).strip().lower()
    if text in ("inf", "+inf"):
        return math.inf
    try:
        return float(text)
    except ValueError:
        raise CommandError(f"SNR must be a number of dB or 'inf', got {value!r}", returncode=CONFIG_ERROR) from None


class ExperimentCommand(BaseCommand):
    """Base for commands that read an experiment config and write into an output directory.

    Subclasses implement ``run(config, out_dir, **options)`` returning
    ``(inputs, outputs)``: lists of paths to hash into the manifest.
    """

    def add_arguments(self, parser):
        parser.add_argument("--config", help="TOML (or JSON) experiment config; defaults apply when omitted")
        parser.add_argument("--out", help="output directory (default: VOXELCOM_OUTPUT_DIR)")
        parser.add_argument("--seed", type=int, help="overrides the config seed and VOXELCOM_SEED")

    def handle(self, *args, **options):
        try:
            config = load_config(options.get("config"), options.get("seed"))
        except (ImproperlyConfigured, ValidationError, ValueError) as exc:
            raise CommandError(f"config error: {exc}", returncode=CONFIG_ERROR) from exc
        out_dir = Path(options.get("out") or settings.VOXELCOM_OUTPUT_DIR)
        out_dir.mkdir(parents=True, exist_ok=True)
        try:
            run_options = {key: value for key, value in options.items() if key != "config"}
            inputs, outputs = self.run(config, out_dir, **run_options)
        except PrerequisiteError as exc:
            raise CommandError(str(exc), returncode=PREREQUISITE_MISSING) from exc
        except FormatError as exc:
            raise CommandError(f"unreadable input: {exc}", returncode=PREREQUISITE_MISSING) from exc
        except NumericError as exc:
            raise CommandError(f"numeric failure: {exc}", returncode=NUMERIC_FAILURE) from exc
        except (ImproperlyConfigured, ValidationError, ValueError) as exc:
            # includes ShapeError: settings that do not fit the scene
            raise CommandError(f"config error: {exc}", returncode=CONFIG_ERROR) from exc
        manifest = self.write_manifest(out_dir, config, options, inputs, outputs)
        self.stdout.write(self.style.SUCCESS(f"{self.command_name}: wrote {len(outputs)} file(s); manifest {manifest.name}"))

    def run(self, config, out_dir, **options):
        raise NotImplementedError("subclasses of ExperimentCommand must provide a run() method")

    @property
    def command_name(self):
        return self.__class__.__module__.rsplit(".", 1)[-1]

    def write_manifest(self, out_dir, config, options, inputs, outputs):
        recorded = {
            key: value
            for key, value in options.items()
            if key not in ("verbosity", "settings", "pythonpath", "traceback", "no_color", "force_color", "skip_checks", "stdout", "stderr")
        }
        manifest = {
            "command": self.command_name,
            "options": recorded,
            "config": config_to_dict(config),
            "seed": config.seed,
            "inputs": {Path(p).name: content_hash(p) for p in inputs},
            "outputs": {Path(p).name: content_hash(p) for p in outputs},
        }
        path = out_dir / f"manifest_{self.command_name}.json"
        write_manifest(path, manifest)
        return path

    # --- prerequisites -----------------------------------------------------------------

    def require(self, path, command):
        if not Path(path).exists():
            raise PrerequisiteError(Path(path).name, command)
        return Path(path)

    def load_dataset(self, out_dir, config):
        views_path = self.require(out_dir / VIEWS_FILE, "gen_scene")
        records = read_views(views_path)
        train, test = [], []
        for entry in records:
            image = read_ppm(self.require(out_dir / IMAGE_DIR / entry["image"], "gen_scene"))
            view = View.from_record(entry, image)
            (train if entry["split"] == "train" else test).append(view)
        return SceneDataset(config.scene.scene_id, train, test)

    def load_scene(self, out_dir):
        return VoxelFeatureGrid.load(self.require(out_dir / SCENE_FILE, "gen_scene"))

    def load_grid(self, out_dir, name, command):
        return VoxelFeatureGrid.from_checkpoint(read_checkpoint(self.require(out_dir / name, command)))

    def load_system(self, out_dir, config):
        path = self.require(out_dir / SYSTEM_FILE, "train_codec")
        return JsccSystem(config.codec, config.jscc).load(path)

    def save_grid(self, grid, path):
        write_checkpoint(path, grid.checkpoint_tensors())

    def report_views(self, grid, dataset, steps):
        train_psnr, _, _ = evaluate_grid(grid, dataset.train_views, steps)
        test_psnr, test_ssim, _ = evaluate_grid(grid, dataset.test_views, steps)
        self.stdout.write(f"train PSNR {train_psnr:.2f} dB, test PSNR {test_psnr:.2f} dB, test SSIM {test_ssim:.4f}")
        return test_psnr, test_ssim

    def persist(self, records):
        """Store records in the database when it has been migrated; the CSV is always written."""
        from ..models import MetricsRecord

        try:
            MetricsRecord.objects.bulk_create(records)
        except DatabaseError as exc:
            logger.info("metrics not stored in the database (%s); run `manage.py migrate` to keep them", exc)


def eye_from_pose(text, radius):
    """``x,y,z`` camera position, scaled to ``radius`` from the origin."""
    try:
        eye = np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        raise CommandError(f"--pose must be a view id or x,y,z; got {text!r}", returncode=CONFIG_ERROR) from None
    if eye.shape != (3,) or not np.linalg.norm(eye):
        raise CommandError(f"--pose must be a non-zero x,y,z position; got {text!r}", returncode=CONFIG_ERROR)
    return radius * eye / np.linalg.norm(eye)
