"""The three-stage optimisation schedule.

Stage 1 fits a voxel feature grid to the training views. Stage 2 freezes the
grid and trains the codec and JSCC heads through the simulated channel on
rate plus feature distortion. Stage 3 freezes the networks and fine-tunes the
grid on the views it renders after the full transmit chain.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .channel import noise_variance
from .codec import LatentPatches
from .exceptions import NumericError
from .jscc import allocation_for, transmit_tensor
from .scene import DEFAULT_BBOX, Rays, VoxelFeatureGrid, make_rays, render_rays
from .storage import write_csv

logger = logging.getLogger(__name__)

RAY_STREAM = 1
NOISE_STREAM = 2
CROP_STREAM = 3
INITIAL_DENSITY_LOGIT = -6.0
INITIAL_COLOR = 0.5
LOG_FIELDS = ("stage", "iter", "R_v", "R_z", "feat_mse", "recon_mse", "total", "lr", "snr_db")


@dataclass(frozen=True)
class TrainingSchedule:
    t1: int = 2000
    t2: int = 2000
    t3: int = 1000
    lr_grid: float = 0.1
    lr_codec: float = 1e-3
    betas: tuple = (0.9, 0.999)
    warmup_frac: float = 0.02
    decay: float = 0.1
    ray_batch: int = 1024
    grid_batch: int = 2
    crop: int = 16
    log_every: int = 50
    lam: float = 1e-3
    train_snr_db: float = 10.0
    steps_per_ray: int = 96
    seed: int = 0

    def __post_init__(self):
        for name in ("t1", "t2", "t3", "ray_batch", "grid_batch", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")

    def offset(self, stage):
        return {1: 0, 2: self.t1, 3: self.t1 + self.t2}[stage]


@dataclass
class LossReport:
    stage: int
    iteration: int
    R_v: float = 0.0
    R_z: float = 0.0
    feat_mse: float = 0.0
    recon_mse: float = 0.0
    lam: float = 0.0
    lr: float = 0.0
    snr_db: float = float("inf")

    @property
    def total(self):
        return self.lam * (self.R_v + self.R_z) + self.feat_mse + self.recon_mse

    def as_row(self):
        return {
            "stage": self.stage,
            "iter": self.iteration,
            "R_v": self.R_v,
            "R_z": self.R_z,
            "feat_mse": self.feat_mse,
            "recon_mse": self.recon_mse,
            "total": self.total,
            "lr": self.lr,
            "snr_db": self.snr_db,
        }


@dataclass
class TrainingLog:
    reports: list = field(default_factory=list)

    def append(self, report):
        self.reports.append(report)

    def stage(self, stage):
        return [r for r in self.reports if r.stage == stage]

    def to_rows(self):
        return [r.as_row() for r in self.reports]

    def write(self, path):
        write_csv(path, LOG_FIELDS, self.to_rows())


def initial_grid(dims, channels, bbox):
    values = np.full((*dims, channels), 0.0, dtype=np.float32)
    values[..., 0] = INITIAL_DENSITY_LOGIT
    values[..., 1:4] = INITIAL_COLOR
    return VoxelFeatureGrid(values, bbox)


@dataclass
class RayBank:
    """Every training-view pixel as a ray with its target colour."""

    rays: Rays
    targets: np.ndarray

    @classmethod
    def from_views(cls, views):
        if not views:
            raise ValueError("no training views to sample rays from")
        bundles = [make_rays(view) for view in views]
        origins = np.concatenate([b.origins for b in bundles])
        directions = np.concatenate([b.directions for b in bundles])
        targets = np.concatenate([view.image.reshape(-1, 3) for view in views]).astype(np.float32)
        return cls(Rays(origins, directions), targets)

    def sample(self, rng, batch):
        index = rng.integers(0, len(self.targets), size=min(batch, len(self.targets)))
        return self.rays.subset(index), self.targets[index]


def _should_log(step, total, every):
    return step == 0 or (step + 1) % every == 0 or step + 1 == total


def _diverged(stage, step, lr, exc):
    return NumericError(
        f"stage {stage} diverged at iteration {step + 1} with lr={lr:.3g}; lower the learning rate ({exc})"
    )


# --- stage 1 -------------------------------------------------------------------------


def stage1_fit_nerf(dataset, schedule, dims, channels=4, bbox=None, init_grid=None, log=None):
    """Fit grid values to the training views by mean squared pixel error."""
    log = log if log is not None else TrainingLog()
    if init_grid is None:
        init_grid = initial_grid(dims, channels, bbox or DEFAULT_BBOX)
    grid = init_grid.trainable()
    bank = RayBank.from_views(dataset.train_views)
    rays_rng = np.random.default_rng([schedule.seed, RAY_STREAM])
    state = nc.AdamState()
    params = {"grid.values": grid.values}
    offset = schedule.offset(1)
    for step in range(schedule.t1):
        lr = nc.learning_rate(schedule.lr_grid, step, schedule.t1, schedule.warmup_frac, schedule.decay)
        rays, targets = bank.sample(rays_rng, schedule.ray_batch)
        try:
            rgb = render_rays(grid, rays, schedule.steps_per_ray).rgb
            loss = nc.mse(rgb, targets)
            grads = nc.backward(loss)
            nc.adam_step(params, {"grid.values": grads.get(grid.values)}, state, lr, schedule.betas)
        except NumericError as exc:
            raise _diverged(1, step, lr, exc) from exc
        if _should_log(step, schedule.t1, schedule.log_every):
            report = LossReport(1, offset + step + 1, recon_mse=float(loss.item()), lr=lr)
            log.append(report)
            logger.info("stage 1 iter %d: recon_mse=%.6f lr=%.3g", report.iteration, report.recon_mse, lr)
    logger.info("stage 1 complete at cumulative iteration %d", offset + schedule.t1)
    return grid.detached(), log


# --- stage 2 -------------------------------------------------------------------------


def augment(grid_values, crop, batch, rng):
    """Random crops (side ``crop``) with random axis flips, as a (batch, c, c, c, C) array."""
    dims = grid_values.shape[:3]
    side = [min(crop, d) for d in dims]
    out = np.empty((batch, *side, grid_values.shape[3]), dtype=np.float32)
    for b in range(batch):
        start = [rng.integers(0, d - s + 1) for d, s in zip(dims, side)]
        block = grid_values[start[0] : start[0] + side[0], start[1] : start[1] + side[1], start[2] : start[2] + side[2]]
        for axis in range(3):
            if rng.random() < 0.5:
                block = np.flip(block, axis=axis)
        out[b] = block
    return out


def feature_loss(codec, jscc, x, lam, jscc_config, variance, rng):
    """L_feat for a (N, D, H, W, C) batch; returns the loss tensor and its report terms.

    Rates use additive unit-uniform noise in place of rounding for both v and z.
    """
    patches = codec.analysis(nc.Tensor(x))
    z = codec.hyper_encode(patches)
    z_noisy = nc.add(z, rng.uniform(-0.5, 0.5, size=z.shape).astype(np.float32))
    prior = codec.hyper_decode(z_noisy, patches.lattice)
    v_noisy = nc.add(patches.values, rng.uniform(-0.5, 0.5, size=patches.values.shape).astype(np.float32))
    rates = codec.rate_terms(v_noisy, prior, z_noisy)
    k_bar = allocation_for(jscc_config, rates.per_patch.data).k_bar
    v_hat = transmit_tensor(jscc, patches.values, prior.mu, k_bar, variance, rng)
    f_hat = codec.synthesis(LatentPatches(v_hat, patches.lattice))
    feat_mse = nc.mse(f_hat, x)
    rate = nc.mean(nc.add(rates.R_v, rates.R_z))
    loss = nc.add(nc.mul(rate, lam), feat_mse)
    terms = {
        "R_v": float(np.mean(rates.R_v.data, dtype=np.float64)),
        "R_z": float(np.mean(rates.R_z.data, dtype=np.float64)),
        "feat_mse": float(feat_mse.item()),
    }
    return loss, terms


def stage2_train_codec(grid, schedule, codec, jscc, jscc_config, log=None):
    """Train codec and JSCC parameters on L_feat with the grid frozen; returns the log."""
    log = log if log is not None else TrainingLog()
    values = grid.values.data
    params = {**codec.params, **jscc.params}
    codec.params.set_trainable(True)
    jscc.params.set_trainable(True)
    crop_rng = np.random.default_rng([schedule.seed, CROP_STREAM])
    noise_rng = np.random.default_rng([schedule.seed, NOISE_STREAM])
    variance = noise_variance(schedule.train_snr_db)
    state = nc.AdamState()
    offset = schedule.offset(2)
    for step in range(schedule.t2):
        lr = nc.learning_rate(schedule.lr_codec, step, schedule.t2, schedule.warmup_frac, schedule.decay)
        batch = augment(values, schedule.crop, schedule.grid_batch, crop_rng)
        try:
            loss, terms = feature_loss(codec, jscc, batch, schedule.lam, jscc_config, variance, noise_rng)
            grads = nc.backward(loss)
            named = {name: grads[t] for name, t in params.items() if t in grads}
            nc.adam_step(params, named, state, lr, schedule.betas)
        except NumericError as exc:
            raise _diverged(2, step, lr, exc) from exc
        if _should_log(step, schedule.t2, schedule.log_every):
            report = LossReport(2, offset + step + 1, lam=schedule.lam, lr=lr, snr_db=schedule.train_snr_db, **terms)
            log.append(report)
            logger.info(
                "stage 2 iter %d: R_v=%.1f R_z=%.1f feat_mse=%.6f total=%.6f",
                report.iteration,
                report.R_v,
                report.R_z,
                report.feat_mse,
                report.total,
            )
    codec.params.set_trainable(False)
    jscc.params.set_trainable(False)
    logger.info("stage 2 complete at cumulative iteration %d", offset + schedule.t2)
    return log


# --- stage 3 -------------------------------------------------------------------------


def transmitted_grid(grid, codec, jscc, jscc_config, variance, rng, eta=None):
    """The grid as decoded after the channel, differentiable in ``grid.values``.

    z is rounded as in the side information and enters as a constant.
    """
    patches = codec.analysis(grid.values)
    z = nc.Tensor(np.clip(np.round(codec.hyper_encode(patches).data), -128, 127))
    prior = codec.hyper_decode(z, patches.lattice)
    rates = codec.rate_terms(patches.values.detach(), prior, z)
    k_bar = allocation_for(jscc_config, rates.per_patch.data, eta).k_bar
    v_hat = transmit_tensor(jscc, patches.values, prior.mu, k_bar, variance, rng)
    decoded = codec.synthesis(LatentPatches(v_hat, patches.lattice))
    return VoxelFeatureGrid(nc.reshape(decoded, decoded.shape[1:]), grid.bbox), rates


def stage3_finetune_nerf(grid, dataset, schedule, codec, jscc, jscc_config, log=None):
    """Fine-tune grid values only, rendering through encode, channel and decode."""
    log = log if log is not None else TrainingLog()
    codec.params.set_trainable(False)
    jscc.params.set_trainable(False)
    grid = grid.trainable()
    bank = RayBank.from_views(dataset.train_views)
    rays_rng = np.random.default_rng([schedule.seed, RAY_STREAM])
    noise_rng = np.random.default_rng([schedule.seed, NOISE_STREAM])
    variance = noise_variance(schedule.train_snr_db)
    state = nc.AdamState()
    params = {"grid.values": grid.values}
    offset = schedule.offset(3)
    for step in range(schedule.t3):
        lr = nc.learning_rate(schedule.lr_grid, step, schedule.t3, schedule.warmup_frac, schedule.decay)
        rays, targets = bank.sample(rays_rng, schedule.ray_batch)
        try:
            decoded, rates = transmitted_grid(grid, codec, jscc, jscc_config, variance, noise_rng)
            rgb = render_rays(decoded, rays, schedule.steps_per_ray).rgb
            loss = nc.mse(rgb, targets)
            grads = nc.backward(loss)
            nc.adam_step(params, {"grid.values": grads.get(grid.values)}, state, lr, schedule.betas)
        except NumericError as exc:
            raise _diverged(3, step, lr, exc) from exc
        if _should_log(step, schedule.t3, schedule.log_every):
            feat = float(np.mean((decoded.values.data - grid.values.data) ** 2, dtype=np.float64))
            report = LossReport(
                3,
                offset + step + 1,
                R_v=float(rates.R_v.data[0]),
                R_z=float(rates.R_z.data[0]),
                feat_mse=feat,
                recon_mse=float(loss.item()),
                lam=schedule.lam,
                lr=lr,
                snr_db=schedule.train_snr_db,
            )
            log.append(report)
            logger.info("stage 3 iter %d: recon_mse=%.6f total=%.6f", report.iteration, report.recon_mse, report.total)
    logger.info("stage 3 complete at cumulative iteration %d", offset + schedule.t3)
    return grid.detached(), log