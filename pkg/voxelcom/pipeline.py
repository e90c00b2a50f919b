"""The feature grid's trip through encoder, channel and decoder, and the experiments built on it."""
import logging
from dataclasses import dataclass
from functools import partial

import numpy as np

from .baseline import planned_cbr, run_separation
from .channel import ChannelConfig, transmit, transmit_side_bits
from .codec import FeatureCodec
from .exceptions import FrameError
from .jscc import JsccCodec, allocation_for, jscc_decode, jscc_encode, tune_eta
from .metrics import psnr_of_views, record
from .scene import VoxelFeatureGrid, render
from .storage import read_checkpoint, write_checkpoint

logger = logging.getLogger(__name__)

# offsets the side-information noise stream from the payload's
SIDE_SEED_OFFSET = 7919
# relative CBR gap still counted as matched
CBR_TOLERANCE = 0.1


@dataclass
class JsccOutcome:
    grid: VoxelFeatureGrid
    frame: object
    cbr: float
    decoded: bool


class JsccSystem:
    """Trained codec and JSCC heads plus the allocation policy."""

    def __init__(self, codec_config, jscc_config, codec=None, jscc=None):
        self.codec_config = codec_config
        self.jscc_config = jscc_config
        self.codec = codec or FeatureCodec(codec_config)
        self.jscc = jscc or JsccCodec(jscc_config, codec_config.latent_width)
        self.codec.params.set_trainable(False)
        self.jscc.params.set_trainable(False)

    def save(self, path):
        write_checkpoint(path, {**self.codec.params.state(), **self.jscc.params.state()})

    def load(self, path):
        state = read_checkpoint(path)
        self.codec.params.load_state(state)
        self.jscc.params.load_state(state)
        return self

    def encode(self, grid, eta=None, target_cbr=None):
        """Frame for ``grid``; ``target_cbr`` (or the configured one) tunes eta first."""
        patches = self.codec.analysis(grid.values.detach())
        prior = self.codec.hyperprior(patches, quantize=True)
        rates = self.codec.rate_report(patches, prior)
        target_cbr = target_cbr if target_cbr is not None else self.jscc_config.target_cbr
        if eta is None and target_cbr is not None and self.jscc_config.allocation == "entropy":
            eta = tune_eta(rates, grid.m, target_cbr, self.jscc_config.levels, self.codec_config.d_z)
        alloc = allocation_for(self.jscc_config, rates, eta)
        frame = jscc_encode(patches, alloc, self.jscc, prior.z.data[0])
        logger.debug("encoded %d patches into %d symbols (R_v=%.1f bits)", patches.count, frame.n_total, rates.R_v)
        return frame, patches, rates

    def channel(self, frame, snr_db, seed=0, max_iters=50):
        """Payload over analog AWGN, side information over its protected digital link."""
        payload = transmit(frame.payload, ChannelConfig(snr_db, seed))
        side = transmit_side_bits(frame.side_bits, snr_db, seed + SIDE_SEED_OFFSET, max_iters)
        return frame.received(payload, side.bits)

    def decode(self, frame, lattice, bbox):
        patches = jscc_decode(frame, self.jscc, self.codec, lattice)
        decoded = self.codec.synthesis(patches).data[0]
        return VoxelFeatureGrid(decoded, bbox)

    def run(self, grid, snr_db, seed=0, eta=None, target_cbr=None, max_iters=50):
        frame, patches, _ = self.encode(grid, eta, target_cbr)
        received = self.channel(frame, snr_db, seed, max_iters)
        try:
            decoded = self.decode(received, patches.lattice, grid.bbox)
            ok = True
        except FrameError as exc:
            logger.warning("JSCC frame lost at %s dB: %s", snr_db, exc)
            decoded = VoxelFeatureGrid(np.zeros(grid.values.shape, dtype=np.float32), grid.bbox)
            ok = False
        return JsccOutcome(decoded, frame, frame.cbr(grid.m), ok)


def evaluate_grid(grid, views, steps):
    """Mean PSNR and SSIM of ``grid`` rendered at ``views`` against their images, plus the renders."""
    images = [render(grid, view, steps).rgb.data for view in views]
    mean_psnr, mean_ssim = psnr_of_views(images, [view.image for view in views])
    return mean_psnr, mean_ssim, images


@dataclass
class ExperimentSettings:
    snr_true_grid: tuple
    snr_est_db: float
    steps: int
    patch: int = 4
    max_iters: int = 50
    seed: int = 0
    scene_id: str = ""


@dataclass
class MatchedRate:
    """Operating point shared by both systems in the degradation experiment."""

    eta: object
    separation_cbr: float
    jscc_cbr: float

    @property
    def mismatch(self):
        return abs(self.jscc_cbr - self.separation_cbr) / self.separation_cbr

    @property
    def matched(self):
        return self.mismatch <= CBR_TOLERANCE

    @property
    def label(self):
        if self.matched:
            return "matched CBR"
        return f"CBR mismatch {100 * self.mismatch:.0f}% (separation {self.separation_cbr:.4g})"


def matched_eta(grid, system, codebook, table, settings):
    """Eta putting the JSCC frame at the separation CBR for the MCS chosen at ``snr_est_db``.

    When that CBR is out of the JSCC range the nearest reachable point is
    used, a warning is logged and the records carry the mismatch.
    """
    reference = planned_cbr(grid, codebook, table, settings.snr_est_db, settings.patch)
    frame, _, _ = system.encode(grid, target_cbr=reference)
    eta = frame.eta if system.jscc_config.allocation == "entropy" else None
    rate = MatchedRate(eta, reference, frame.cbr(grid.m))
    if rate.matched:
        logger.info("matched CBR: separation %.4g, JSCC %.4g", rate.separation_cbr, rate.jscc_cbr)
    else:
        logger.warning(
            "JSCC cannot reach the separation CBR %.4g (closest %.4g); shrink the codebook or patch",
            rate.separation_cbr,
            rate.jscc_cbr,
        )
    return rate


def degradation_point(grid, system, views, codebook, table, settings, rate, position):
    """JSCC and separation records at the ``position``-th true SNR of the sweep."""
    snr = settings.snr_true_grid[position]
    seed = settings.seed + position
    jscc = system.run(grid, snr, seed, eta=rate.eta, max_iters=settings.max_iters)
    jscc_psnr, jscc_ssim, _ = evaluate_grid(jscc.grid, views, settings.steps)
    separation = run_separation(grid, codebook, table, settings.snr_est_db, snr, settings.patch, seed, settings.max_iters)
    sep_psnr, sep_ssim, _ = evaluate_grid(separation.grid, views, settings.steps)
    logger.info("true SNR %.1f dB: JSCC %.2f dB, separation %.2f dB", snr, jscc_psnr, sep_psnr)
    return [
        record(settings.scene_id, "jscc", snr, settings.snr_est_db, jscc.cbr, jscc_psnr, jscc_ssim, seed, rate.label),
        record(
            settings.scene_id, "separation", snr, settings.snr_est_db, separation.cbr, sep_psnr, sep_ssim, seed, rate.label
        ),
    ]


def degradation_experiment(grid, system, views, codebook, table, settings, pool=None):
    """JSCC against separation at matched CBR while the true SNR falls below the design SNR.

    ``pool`` is an optional executor; records come back in sweep order either way.
    """
    rate = matched_eta(grid, system, codebook, table, settings)
    positions = range(len(settings.snr_true_grid))
    point = partial(degradation_point, grid, system, views, codebook, table, settings, rate)
    results = pool.map(point, positions) if pool is not None else map(point, positions)
    return [entry for pair in results for entry in pair]
