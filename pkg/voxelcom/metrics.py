"""Image quality metrics and rate-distortion bookkeeping."""
import logging
import math
from functools import lru_cache
from itertools import groupby

import numpy as np
from scipy.signal import convolve2d

from .exceptions import ShapeError
from .models import MetricsRecord
from .storage import write_csv

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
RD_FIELDS = ("method", "snr_true_db", "snr_est_db", "cbr", "psnr_db", "ssim", "seed", "scene_id")


def _pair(a, b, op):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def psnr(a, b, max_val=1.0):
    a, b = _pair(a, b, "psnr")
    error = float(np.mean((a - b) ** 2))
    if error == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, max(0.0, 10.0 * math.log10(max_val**2 / error))))


@lru_cache(maxsize=4)
def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    offsets = np.arange(size) - (size - 1) / 2.0
    profile = np.exp(-(offsets**2) / (2.0 * sigma**2))
    window = np.outer(profile, profile)
    return window / window.sum()


def ssim(a, b, data_range=1.0):
    """Mean SSIM over valid 11x11 Gaussian windows and over channels."""
    a, b = _pair(a, b, "ssim")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    window = gaussian_window()

    def blur(x):
        return convolve2d(x, window, mode="valid")

    scores = []
    for channel in range(a.shape[2]):
        x, y = a[..., channel], b[..., channel]
        mu_x, mu_y = blur(x), blur(y)
        var_x = blur(x * x) - mu_x * mu_x
        var_y = blur(y * y) - mu_y * mu_y
        cov = blur(x * y) - mu_x * mu_y
        numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores.append(np.mean(numerator / denominator))
    return float(np.mean(scores))


def view_scores(images, references):
    """Per-view (psnr, ssim) pairs."""
    if len(images) != len(references) or not images:
        raise ValueError(f"need matching non-empty image lists, got {len(images)} and {len(references)}")
    return [(psnr(a, b), ssim(a, b)) for a, b in zip(images, references)]


def psnr_of_views(images, references):
    """Mean PSNR and mean SSIM over paired view images."""
    scores = np.array(view_scores(images, references), dtype=np.float64)
    logger.debug("per-view PSNR: %s", ", ".join(f"{p:.2f}" for p in scores[:, 0]))
    return float(scores[:, 0].mean()), float(scores[:, 1].mean())


def _db_or_none(value):
    if value is None or math.isinf(value):
        return None
    return float(value)


def record(scene_id, method, snr_true_db, snr_est_db, cbr, psnr_db, ssim_value, seed=0, label=""):
    """Validated, unsaved MetricsRecord."""
    entry = MetricsRecord(
        scene_id=scene_id,
        method=method,
        snr_true_db=_db_or_none(snr_true_db),
        snr_est_db=_db_or_none(snr_est_db),
        cbr=float(cbr),
        psnr_db=float(psnr_db),
        ssim=float(ssim_value),
        seed=int(seed),
        label=label,
    )
    entry.full_clean(exclude=["created_at"])
    return entry


def _group_key(entry):
    snr = math.inf if entry.snr_true_db is None else entry.snr_true_db
    return entry.method, snr


def aggregate(records):
    """RD table rows grouped by (method, true SNR) and ascending in CBR within each group."""
    rows = []
    ordered = sorted(records, key=_group_key)
    for _, group in groupby(ordered, key=_group_key):
        rows.extend(entry.as_row() for entry in sorted(group, key=lambda e: e.cbr))
    return rows


def write_rd_csv(path, rows):
    write_csv(path, RD_FIELDS, rows)
    logger.info("wrote %d RD rows to %s", len(rows), path)
