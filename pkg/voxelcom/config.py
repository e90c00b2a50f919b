"""Experiment configuration: TOML (or JSON) sections validated into frozen dataclasses."""
import json
import logging
import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from django.core.exceptions import ImproperlyConfigured

from .channel import McsTable
from .codec import CodecConfig
from .forms import SECTION_FORMS
from .jscc import JsccConfig
from .training import TrainingSchedule

logger = logging.getLogger(__name__)

SEED_ENV = "VOXELCOM_SEED"


@dataclass(frozen=True)
class SceneConfig:
    kind: str = "spheres"
    dims: tuple = (32, 32, 32)
    channels: int = 4
    image_size: int = 32
    train_views: int = 16
    test_views: int = 32
    camera_radius: float = 4.0
    fov_deg: float = 30.0
    steps_per_ray: int = 96
    seed: int = 0

    @property
    def scene_id(self):
        return f"{self.kind}-{self.seed}"


@dataclass(frozen=True)
class ChannelSettings:
    snr_db: tuple = (10.0, 9.0, 8.0, 7.0, 6.0)
    snr_est_db: float = 10.0
    train_snr_db: float = 10.0
    seed: int = 0


@dataclass(frozen=True)
class BaselineConfig:
    codebook_size: int = 256
    codebook_sizes: tuple = (16, 64, 256)
    kmeans_iters: int = 25
    patch: int = 4
    matched_codebook_size: int = 16
    matched_patch: int = 2
    ldpc_max_iters: int = 50
    mcs_table: tuple = ()

    @property
    def table(self):
        return McsTable.from_rows(self.mcs_table)


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    jscc: JsccConfig = field(default_factory=JsccConfig)
    channel: ChannelSettings = field(default_factory=ChannelSettings)
    training: TrainingSchedule = field(default_factory=TrainingSchedule)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    @property
    def seed(self):
        return self.scene.seed

    def with_lambda(self, lam):
        return replace(self, codec=replace(self.codec, lam=lam), training=replace(self.training, lam=lam))

    def with_codebook_size(self, size):
        return replace(self, baseline=replace(self.baseline, codebook_size=size))


def _validated(section, data):
    form = SECTION_FORMS[section](data)
    if not form.is_valid():
        problems = "; ".join(f"{key}: {' '.join(messages)}" for key, messages in form.errors.items())
        raise ImproperlyConfigured(f"[{section}] {problems}")
    return form.cleaned_data


def _tuples(values):
    return {k: tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v for k, v in values.items()}


def build_config(data, seed=None):
    """ExperimentConfig from a ``section -> {key: value}`` mapping."""
    unknown = sorted(set(data) - set(SECTION_FORMS))
    if unknown:
        raise ImproperlyConfigured(f"unknown config section(s): {', '.join(unknown)}")
    cleaned = {section: _tuples(_validated(section, data.get(section, {}))) for section in SECTION_FORMS}

    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ImproperlyConfigured(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    if seed is not None:
        cleaned["scene"]["seed"] = seed
        cleaned["channel"]["seed"] = seed

    scene = SceneConfig(**cleaned["scene"])
    codec = CodecConfig(channels=scene.channels, seed=scene.seed, **cleaned["codec"])
    jscc = JsccConfig(seed=scene.seed, **cleaned["jscc"])
    if jscc.kind == "identity" and codec.latent_width > 2 * jscc.k_max:
        raise ImproperlyConfigured(
            f"[jscc] identity heads need 2 * k_max >= {codec.latent_width} (latent width), got k_max={jscc.k_max}"
        )
    channel = ChannelSettings(**cleaned["channel"])
    training = TrainingSchedule(
        lam=codec.lam,
        train_snr_db=channel.train_snr_db,
        steps_per_ray=scene.steps_per_ray,
        seed=scene.seed,
        **cleaned["training"],
    )
    baseline = BaselineConfig(**cleaned["baseline"])
    return ExperimentConfig(scene, codec, jscc, channel, training, baseline)


def read_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ImproperlyConfigured(f"config file {path} does not exist")
    try:
        if path.suffix == ".json":
            return json.loads(path.read_text())
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ImproperlyConfigured(f"{path}: {exc}") from exc


def load_config(path=None, seed=None):
    data = read_config_file(path) if path else {}
    config = build_config(data, seed)
    logger.debug("loaded config from %s (seed %d)", path or "defaults", config.seed)
    return config


def _plain(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(config):
    """Section mapping that :func:`build_config` turns back into ``config``."""
    derived = {
        "codec": {"channels", "seed"},
        "jscc": {"seed"},
        "training": {"lam", "train_snr_db", "steps_per_ray", "seed"},
    }
    data = {}
    for section in SECTION_FORMS:
        values = asdict(getattr(config, section))
        skip = derived.get(section, set())
        out = {}
        for key, value in values.items():
            if key in skip:
                continue
            out["lambda" if key == "lam" else key] = _plain(value)
        data[section] = out
    if data["jscc"].get("target_cbr") is None:
        data["jscc"].pop("target_cbr", None)
    return data
