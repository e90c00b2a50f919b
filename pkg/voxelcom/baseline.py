"""Separation baseline: k-means VQ of feature patches sent over LDPC + QAM.

VQBS bitstream (little-endian header, MSB-first index packing):

    b"VQBS" u16 K u16 d u32 P u8 index_bits u16 crc16(header)
    f32[K*d] codebook
    index_bits x P packed indices, zero-padded to a whole byte
"""
import binascii
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus

from . import numcore as nc
from .channel import coded_symbol_count, select_mcs, transmit_bits
from .exceptions import FormatError, FrameError, ShapeError
from .jscc import compute_cbr
from .scene import VoxelFeatureGrid

logger = logging.getLogger(__name__)

BITSTREAM_MAGIC = b"VQBS"
HEADER = struct.Struct("<4sHHIB")
FLOAT_LIMIT = 1e4
ASSIGN_CHUNK = 4096


@dataclass
class VqCodebook:
    vectors: np.ndarray
    scene_id: str = ""
    mse_history: list = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or len(self.vectors) < 1:
            raise ShapeError("VqCodebook", self.vectors.shape, detail="expected (K, d) with K >= 1")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("codebook centroids must be finite")

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def index_bits(self):
        return max(1, math.ceil(math.log2(self.size)))


def _squared_distances(samples, vectors):
    return cdist(samples, vectors, metric="sqeuclidean")


def vq_apply(samples, codebook):
    """Nearest-centroid index per sample; ties go to the lowest index."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != codebook.dim:
        raise ShapeError("vq_apply", samples.shape, codebook.vectors.shape)
    vectors = codebook.vectors.astype(np.float64)
    indices = np.empty(len(samples), dtype=np.int64)
    for start in range(0, len(samples), ASSIGN_CHUNK):
        chunk = samples[start : start + ASSIGN_CHUNK]
        indices[start : start + len(chunk)] = np.argmin(_squared_distances(chunk, vectors), axis=1)
    return indices


def vq_reconstruct(indices, codebook):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= codebook.size):
        raise IndexError(f"codebook index out of range [0, {codebook.size})")
    return codebook.vectors[indices].copy()


def quantization_mse(samples, codebook, indices=None):
    samples = np.asarray(samples, dtype=np.float64)
    if indices is None:
        indices = vq_apply(samples, codebook)
    return float(np.mean((samples - codebook.vectors[indices].astype(np.float64)) ** 2))


def vq_train(samples, size, iters=25, seed=0, scene_id=""):
    """Lloyd iterations from k-means++ seeds; an emptied cluster takes the worst-served sample."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ShapeError("vq_train", samples.shape, detail="expected (N, d)")
    if len(samples) < size:
        raise ValueError(f"need at least {size} samples to train a {size}-entry codebook, got {len(samples)}")
    centers, _ = kmeans_plusplus(samples, n_clusters=size, random_state=seed)
    history = []
    for iteration in range(iters):
        distances = _squared_distances(samples, centers)
        indices = np.argmin(distances, axis=1)
        nearest = distances[np.arange(len(samples)), indices]
        history.append(float(nearest.sum() / samples.size))
        counts = np.bincount(indices, minlength=size)
        updated = np.zeros_like(centers)
        np.add.at(updated, indices, samples)
        filled = counts > 0
        updated[filled] /= counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            logger.debug("k-means iteration %d: re-seeding %d empty cluster(s)", iteration, empty.size)
            worst = np.argsort(nearest)[::-1][: empty.size]
            updated[empty] = samples[worst]
        if np.array_equal(updated, centers):
            break
        centers = updated
    logger.info("trained %d-entry codebook on %d samples, MSE %.4g", size, len(samples), history[-1])
    return VqCodebook(centers.astype(np.float32), scene_id, history)


# --- bitstream -----------------------------------------------------------------------


def _header_crc(header):
    return binascii.crc_hqx(header, 0xFFFF)


def serialize_digital(indices, codebook):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and indices.max() >= codebook.size:
        raise IndexError(f"codebook index out of range [0, {codebook.size})")
    width = codebook.index_bits
    header = HEADER.pack(BITSTREAM_MAGIC, codebook.size, codebook.dim, len(indices), width)
    shifts = np.arange(width - 1, -1, -1)
    index_bits = ((indices[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return b"".join(
        [
            header,
            struct.pack("<H", _header_crc(header)),
            codebook.vectors.astype("<f4").tobytes(),
            np.packbits(index_bits).tobytes(),
        ]
    )


def deserialize_digital(blob):
    """Inverse of :func:`serialize_digital`; returns ``(indices, vectors)``.

    Residual bit errors in the body stay where they land: corrupted floats are
    only made finite and bounded, and an out-of-range index wraps modulo K.
    """
    if len(blob) < HEADER.size + 2:
        raise FormatError("bitstream shorter than its header")
    header = blob[: HEADER.size]
    (crc,) = struct.unpack_from("<H", blob, HEADER.size)
    if _header_crc(header) != crc:
        raise FrameError("bitstream header failed its CRC")
    magic, size, dim, count, width = HEADER.unpack(header)
    if magic != BITSTREAM_MAGIC:
        raise FormatError(f"bad bitstream magic {magic!r}")
    offset = HEADER.size + 2
    floats = size * dim
    index_bytes = (count * width + 7) // 8
    if len(blob) < offset + 4 * floats + index_bytes:
        raise FormatError("bitstream body is truncated")
    vectors = np.frombuffer(blob, dtype="<f4", count=floats, offset=offset).astype(np.float32).reshape(size, dim)
    vectors = np.clip(np.nan_to_num(vectors, nan=0.0, posinf=FLOAT_LIMIT, neginf=-FLOAT_LIMIT), -FLOAT_LIMIT, FLOAT_LIMIT)
    offset += 4 * floats
    packed = np.frombuffer(blob, dtype=np.uint8, count=index_bytes, offset=offset)
    bits = np.unpackbits(packed)[: count * width].reshape(count, width).astype(np.int64)
    indices = bits @ (1 << np.arange(width - 1, -1, -1))
    return indices % size, vectors


def bitstream_bits(blob):
    return np.unpackbits(np.frombuffer(blob, dtype=np.uint8))


def separation_cbr(n_bits, entry, m):
    """Codebook, index and parity bits converted to symbols, per source dimension."""
    return compute_cbr(coded_symbol_count(n_bits, entry), m)


def planned_cbr(grid, codebook, table, snr_est_db, patch=4):
    """CBR of the separation frame at the MCS chosen for ``snr_est_db``, without sending it."""
    samples, _ = grid_patches(grid, patch)
    blob = serialize_digital(vq_apply(samples, codebook), codebook)
    return separation_cbr(8 * len(blob), select_mcs(table, snr_est_db), grid.m)


# --- end to end ----------------------------------------------------------------------


def grid_patches(grid, patch):
    """(P, patch^3 * C) sample matrix from a grid, plus the patch lattice."""
    values = grid.values.data[None]
    dims = grid.dims
    if any(d % patch for d in dims):
        raise ShapeError("grid_patches", dims, detail=f"dims must be multiples of {patch}")
    merged = nc.patch_merge(nc.Tensor(values), patch).data[0]
    lattice = merged.shape[:3]
    return merged.reshape(-1, merged.shape[-1]), lattice


def patches_to_grid(vectors, lattice, patch, bbox):
    merged = np.asarray(vectors, dtype=np.float32).reshape(1, *lattice, -1)
    return VoxelFeatureGrid(nc.Tensor(nc.patch_unmerge(nc.Tensor(merged), patch).data[0]), bbox)


@dataclass
class SeparationOutcome:
    grid: VoxelFeatureGrid
    cbr: float
    entry: object
    decoded: bool
    bit_errors: int
    failed_blocks: int


def run_separation(grid, codebook, table, snr_est_db, snr_true_db, patch=4, seed=0, max_iters=50):
    """Quantise, serialise, send at the MCS chosen for ``snr_est_db``, receive at ``snr_true_db``."""
    samples, lattice = grid_patches(grid, patch)
    indices = vq_apply(samples, codebook)
    blob = serialize_digital(indices, codebook)
    bits = bitstream_bits(blob)
    entry = select_mcs(table, snr_est_db)
    result = transmit_bits(bits, entry, snr_true_db, seed=seed, max_iters=max_iters)
    bit_errors = int(np.count_nonzero(result.bits != bits))
    cbr = compute_cbr(result.symbols, grid.m)
    received = np.packbits(result.bits).tobytes()
    try:
        decoded_indices, vectors = deserialize_digital(received)
        if vectors.shape[1] != samples.shape[1] or len(decoded_indices) != len(samples):
            raise FrameError("bitstream header describes a different grid")
    except (FrameError, FormatError) as exc:
        logger.warning("separation decode failed at %.1f dB (MCS %s): %s", snr_true_db, entry.describe(), exc)
        empty = VoxelFeatureGrid(np.zeros(grid.values.shape, dtype=np.float32), grid.bbox)
        return SeparationOutcome(empty, cbr, entry, False, bit_errors, result.failed_blocks)
    reconstructed = patches_to_grid(vectors[decoded_indices], lattice, patch, grid.bbox)
    logger.info(
        "separation %s at %.1f dB (est %.1f): %d bit errors, CBR %.4g",
        entry.describe(),
        snr_true_db,
        snr_est_db,
        bit_errors,
        cbr,
    )
    return SeparationOutcome(reconstructed, cbr, entry, True, bit_errors, result.failed_blocks)
