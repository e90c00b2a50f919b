"""Entropy-driven bandwidth allocation and the variable-rate JSCC heads.

The encoder head always produces 2 * k_max reals per patch; a patch granted
k symbols sends the first 2k of them as k complex (I, Q) pairs. The whole
frame is scaled to unit average symbol power and the gain travels in the
side information, together with the quantised hyperprior z and the level
index of every patch.

Side-information bit layout (MSB first), padded with zeros to a whole byte
and followed by a CRC-16 of the padded bytes:

    1 bit          table format: 0 dense, 1 sparse
    8 bits x d_z   z, two's complement
    16 bits        frame gain, IEEE half precision
    dense:         level_bits per patch
    sparse:        count (bit_length(P) bits), then per granted patch
                   index (bit_length(P - 1) bits) and level (level_bits)
"""
import binascii
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .channel import side_symbol_count
from .codec import LatentPatches, RateReport
from .exceptions import FrameError, ShapeError
from .nn import Dense, ParameterSet
from .storage import pack_frame, unpack_frame

logger = logging.getLogger(__name__)

JSCC_KINDS = ("dense", "identity")
ALLOCATION_MODES = ("entropy", "full")
GAIN_RANGE = (2.0**-14, 65504.0)


@dataclass(frozen=True)
class JsccConfig:
    kind: str = "dense"
    eta: float = 0.2
    q_levels: tuple = (0, 2, 4, 8, 16, 32)
    k_max: int = 32
    hidden: int = 64
    allocation: str = "entropy"
    side_modulation: str = "QPSK"
    side_rate: str = "1/2"
    target_cbr: float = None
    seed: int = 0

    @property
    def levels(self):
        return tuple(sorted(set(self.q_levels) | {0}))


def level_bits(n_levels):
    return max(1, (n_levels - 1).bit_length())


# --- allocation ------------------------------------------------------------------------


@dataclass
class BandwidthAllocation:
    k_bar: np.ndarray
    eta: float
    q_levels: tuple

    def __post_init__(self):
        self.k_bar = np.asarray(self.k_bar, dtype=np.int64)
        self.q_levels = tuple(sorted(set(self.q_levels) | {0}))
        if not np.isin(self.k_bar, self.q_levels).all():
            raise ValueError(f"allocation uses symbol counts outside {self.q_levels}")

    @property
    def n_payload(self):
        return int(self.k_bar.sum())

    @property
    def level_index(self):
        return np.searchsorted(np.array(self.q_levels), self.k_bar).astype(np.uint8)

    @classmethod
    def from_level_index(cls, level_index, q_levels, eta=float("nan")):
        levels = np.array(sorted(set(q_levels) | {0}))
        return cls(levels[np.asarray(level_index, dtype=np.int64)], eta, tuple(levels.tolist()))


def allocate(rates, eta, q_levels):
    """k_i = the level nearest to eta * bits_i, ties going to the larger level."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if not q_levels:
        raise ValueError("q_levels is empty")
    per_patch = rates.per_patch_bits if isinstance(rates, RateReport) else np.asarray(rates, dtype=np.float64)
    levels = np.array(sorted(set(q_levels) | {0}), dtype=np.float64)
    distance = np.abs(levels[None, :] - eta * per_patch[..., None])
    # argmin over the reversed levels picks the largest of equally near levels
    nearest = len(levels) - 1 - np.argmin(distance[..., ::-1], axis=-1)
    return BandwidthAllocation(levels[nearest].astype(np.int64), eta, tuple(levels.astype(int).tolist()))


def allocate_full(count, k_max, q_levels):
    return BandwidthAllocation(np.full(count, k_max), float("inf"), q_levels)


def compute_cbr(n_total, m):
    if m <= 0:
        raise ValueError(f"source dimension must be positive, got {m}")
    return n_total / m


def tune_eta(rates, m, target_cbr, q_levels, d_z, lo=1e-4, hi=1e4, iterations=60):
    """Geometric bisection on eta so that the frame CBR lands nearest ``target_cbr``."""
    per_patch = rates.per_patch_bits if isinstance(rates, RateReport) else np.asarray(rates, dtype=np.float64)
    n_levels = len(set(q_levels) | {0})

    def cbr_at(eta):
        alloc = allocate(per_patch, eta, q_levels)
        side = SideInfo.bit_length(alloc.level_index, d_z, n_levels)
        return compute_cbr(alloc.n_payload + side_symbol_count(side), m)

    for _ in range(iterations):
        mid = math.sqrt(lo * hi)
        if cbr_at(mid) > target_cbr:
            hi = mid
        else:
            lo = mid
    best = min((lo, hi), key=lambda eta: abs(cbr_at(eta) - target_cbr))
    logger.info("tuned eta=%.5g for target CBR %.5g (achieved %.5g)", best, target_cbr, cbr_at(best))
    return best


def allocation_heat(lattice, alloc):
    """Rows (d, r, c, k_bar) in patch order."""
    index = np.indices(lattice).reshape(3, -1).T
    return [
        {"d": int(d), "r": int(r), "c": int(c), "k_bar": int(k)} for (d, r, c), k in zip(index, alloc.k_bar)
    ]


# --- side information ------------------------------------------------------------------


def _to_bits(value, width):
    return [(int(value) >> shift) & 1 for shift in range(width - 1, -1, -1)]


def _from_bits(bits):
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value


def _crc(payload_bits):
    return binascii.crc_hqx(np.packbits(np.asarray(payload_bits, dtype=np.uint8)).tobytes(), 0xFFFF)


@dataclass
class SideInfo:
    z: np.ndarray
    gain: float
    level_index: np.ndarray

    def __post_init__(self):
        self.z = np.clip(np.round(np.asarray(self.z, dtype=np.float64)), -128, 127).astype(np.int64).ravel()
        self.gain = float(np.float16(np.clip(self.gain, *GAIN_RANGE)))
        self.level_index = np.asarray(self.level_index, dtype=np.uint8).ravel()

    @staticmethod
    def _table_bits(level_index, n_levels):
        count = len(level_index)
        width = level_bits(n_levels)
        granted = np.flatnonzero(level_index)
        dense = count * width
        sparse = count.bit_length() + len(granted) * (max(1, (count - 1).bit_length()) + width)
        return dense, sparse

    @classmethod
    def bit_length(cls, level_index, d_z, n_levels):
        dense, sparse = cls._table_bits(np.asarray(level_index), n_levels)
        body = 1 + 8 * d_z + 16 + min(dense, sparse)
        return body + (-body) % 8 + 16

    def to_bits(self, n_levels):
        count = len(self.level_index)
        width = level_bits(n_levels)
        dense, sparse = self._table_bits(self.level_index, n_levels)
        bits = [int(sparse < dense)]
        for value in self.z:
            bits += _to_bits(int(value) & 0xFF, 8)
        bits += _to_bits(np.float16(self.gain).view(np.uint16), 16)
        if sparse < dense:
            granted = np.flatnonzero(self.level_index)
            bits += _to_bits(len(granted), count.bit_length())
            for patch in granted:
                bits += _to_bits(patch, max(1, (count - 1).bit_length()))
                bits += _to_bits(self.level_index[patch], width)
        else:
            for level in self.level_index:
                bits += _to_bits(level, width)
        bits += [0] * ((-len(bits)) % 8)
        bits += _to_bits(_crc(bits), 16)
        return np.array(bits, dtype=np.uint8)

    @classmethod
    def from_bits(cls, bits, count, d_z, n_levels):
        bits = np.asarray(bits, dtype=np.uint8)
        if len(bits) < 32 or len(bits) % 8:
            raise FrameError(f"side information of {len(bits)} bits is malformed")
        body, check = bits[:-16], bits[-16:]
        if _crc(body) != _from_bits(check):
            raise FrameError("side information failed its CRC; allocation unknown")
        cursor = 0

        def read(width):
            nonlocal cursor
            if cursor + width > len(body):
                raise FrameError("side information is shorter than its declared table")
            value = _from_bits(body[cursor : cursor + width])
            cursor += width
            return value

        sparse = read(1)
        z = np.array([read(8) for _ in range(d_z)], dtype=np.int64)
        z = np.where(z >= 128, z - 256, z)
        gain = float(np.array([read(16)], dtype=np.uint16).view(np.float16)[0])
        width = level_bits(n_levels)
        level_index = np.zeros(count, dtype=np.uint8)
        if sparse:
            for _ in range(read(count.bit_length())):
                patch = read(max(1, (count - 1).bit_length()))
                if patch >= count:
                    raise FrameError(f"side information names patch {patch} of {count}")
                level_index[patch] = read(width)
        else:
            level_index[:] = [read(width) for _ in range(count)]
        if level_index.max(initial=0) >= n_levels:
            raise FrameError("side information names an unknown level")
        return cls(z, gain, level_index)


# --- frames ----------------------------------------------------------------------------


@dataclass
class ChannelFrame:
    """Payload symbols plus side-information bits, as sent or as received."""

    payload: np.ndarray
    side_bits: np.ndarray
    count: int
    d_z: int
    q_levels: tuple
    eta: float = float("nan")
    _side: SideInfo = field(default=None, repr=False)

    @property
    def side_info(self):
        if self._side is None:
            self._side = SideInfo.from_bits(self.side_bits, self.count, self.d_z, len(self.q_levels))
        return self._side

    @property
    def alloc(self):
        return BandwidthAllocation.from_level_index(self.side_info.level_index, self.q_levels, self.eta)

    @property
    def n_payload(self):
        return len(self.payload)

    @property
    def n_side(self):
        return side_symbol_count(len(self.side_bits))

    @property
    def n_total(self):
        return self.n_payload + self.n_side

    def cbr(self, m):
        return compute_cbr(self.n_total, m)

    def received(self, payload, side_bits):
        return ChannelFrame(
            np.asarray(payload, dtype=np.complex64), np.asarray(side_bits, dtype=np.uint8), self.count, self.d_z, self.q_levels, self.eta
        )


def serialize_frame(frame):
    return pack_frame(frame.side_info.level_index, frame.side_bits, frame.payload)


def parse_frame(blob, d_z, q_levels):
    level_index, side_bits, payload = unpack_frame(blob)
    frame = ChannelFrame(payload, side_bits, len(level_index), d_z, tuple(sorted(set(q_levels) | {0})))
    if not np.array_equal(frame.side_info.level_index, level_index):
        raise FrameError("frame header and side information disagree on the allocation")
    return frame


def frame_cbr(blob, m):
    """CBR recomputed from serialized bytes alone."""
    _, side_bits, payload = unpack_frame(blob)
    return compute_cbr(len(payload) + side_symbol_count(len(side_bits)), m)


# --- networks ------------------------------------------------------------------------


class JsccCodec:
    def __init__(self, config, d_v, params=None):
        self.config = config
        self.d_v = d_v
        self.width = 2 * config.k_max
        self.levels = config.levels
        self.params = params if params is not None else ParameterSet(seed=config.seed + 1000)
        if config.kind == "dense":
            self.encoder = (
                Dense(self.params, "jscc.fe.fc1", d_v, config.hidden),
                Dense(self.params, "jscc.fe.fc2", config.hidden, config.hidden),
                Dense(self.params, "jscc.fe.out", config.hidden, self.width),
            )
            self.decoder = (
                Dense(self.params, "jscc.fd.fc1", self.width + len(self.levels), config.hidden),
                Dense(self.params, "jscc.fd.fc2", config.hidden, config.hidden),
                Dense(self.params, "jscc.fd.out", config.hidden, d_v),
            )
        elif config.kind == "identity":
            if d_v > self.width:
                raise ShapeError("jscc", (d_v,), (self.width,), detail="identity head needs d_v <= 2 * k_max")
        else:
            raise ValueError(f"unsupported jscc kind {config.kind!r}")

    def encode_reals(self, v):
        if self.config.kind == "identity":
            pad = np.zeros((*v.shape[:-1], self.width - self.d_v), dtype=v.dtype)
            return nc.concat([v, pad], axis=-1) if pad.shape[-1] else v
        fc1, fc2, out = self.encoder
        return out(nc.leaky_relu(fc2(nc.leaky_relu(fc1(v)))))

    def decode_reals(self, x, level_index):
        if self.config.kind == "identity":
            return nc.take(x, (Ellipsis, slice(0, self.d_v)))
        onehot = np.eye(len(self.levels), dtype=x.dtype)[np.asarray(level_index, dtype=np.int64)]
        fc1, fc2, out = self.decoder
        h = nc.leaky_relu(fc1(nc.concat([x, onehot], axis=-1)))
        return out(nc.leaky_relu(fc2(h)))

    def real_mask(self, k_bar):
        k_bar = np.asarray(k_bar)
        if k_bar.max(initial=0) > self.config.k_max:
            raise ValueError(f"allocation of {k_bar.max()} symbols exceeds k_max={self.config.k_max}")
        return (np.arange(self.width) < 2 * k_bar[..., None]).astype(np.float32)

    def level_index(self, k_bar):
        return np.searchsorted(np.array(self.levels), np.asarray(k_bar))

    def save(self, path):
        self.params.save(path)


def patch_symbols(jscc, patches, k_bar):
    """Per-patch complex symbols before frame normalisation."""
    reals = jscc.encode_reals(patches.values.detach()).data[0].astype(np.float64)
    mask = jscc.real_mask(k_bar).astype(bool)
    return [row[keep][0::2] + 1j * row[keep][1::2] for row, keep in zip(reals, mask)]


def jscc_encode(patches, alloc, jscc, z):
    """Build the transmitted frame for one grid's patches."""
    if len(alloc.k_bar) != patches.count:
        raise ShapeError("jscc_encode", (len(alloc.k_bar),), (patches.count,), detail="allocation per patch")
    symbols = patch_symbols(jscc, patches, alloc.k_bar)
    stream = np.concatenate(symbols) if symbols else np.zeros(0, dtype=np.complex128)
    energy = float(np.sum(np.abs(stream) ** 2))
    gain = math.sqrt(stream.size / energy) if stream.size and energy > 0 else 1.0
    side = SideInfo(z, gain, alloc.level_index)
    payload = (stream * side.gain).astype(np.complex64)
    frame = ChannelFrame(payload, side.to_bits(len(jscc.levels)), patches.count, side.z.size, jscc.levels, alloc.eta)
    frame._side = side
    return frame


def jscc_decode(frame, jscc, codec, lattice):
    """Recover patches from a received frame; raises FrameError when the side information is corrupt."""
    side = frame.side_info
    alloc = frame.alloc
    if alloc.n_payload != frame.n_payload:
        raise FrameError(f"payload carries {frame.n_payload} symbols, allocation expects {alloc.n_payload}")
    if int(np.prod(lattice)) != frame.count:
        raise ShapeError("jscc_decode", tuple(lattice), (frame.count,), detail="lattice against patch count")
    prior = codec.hyper_decode(nc.Tensor(side.z[None, :]), lattice)
    reals = np.zeros((frame.count, jscc.width), dtype=np.float32)
    flat = np.empty(2 * frame.n_payload, dtype=np.float64)
    flat[0::2] = np.real(frame.payload)
    flat[1::2] = np.imag(frame.payload)
    reals[jscc.real_mask(alloc.k_bar).astype(bool)] = flat / side.gain
    v_hat = jscc.decode_reals(nc.Tensor(reals[None]), side.level_index[None]).data.copy()
    silent = alloc.k_bar == 0
    v_hat[0, silent] = prior.mu.data[0, silent]
    return LatentPatches(nc.Tensor(v_hat), tuple(lattice))


def transmit_tensor(jscc, v, mu, k_bar, noise_variance, rng):
    """Differentiable stand-in for encode, AWGN and decode used during training.

    The noise sample is a constant of the graph, so gradients pass through it
    unchanged; patches granted no symbols decode to ``mu``.
    """
    x = jscc.encode_reals(v)
    mask = jscc.real_mask(k_bar)
    sent = nc.mul(x, mask)
    n_payload = np.asarray(k_bar).sum(axis=-1).astype(np.float64)
    energy = nc.reduce_sum(nc.mul(sent, sent), axis=(1, 2), keepdims=True)
    usable = (n_payload > 0).reshape(-1, 1, 1)
    energy = nc.add(energy, (~usable).astype(np.float32))
    gain = nc.sqrt(nc.div(np.maximum(n_payload, 1.0).reshape(-1, 1, 1).astype(np.float32), energy))
    noise = rng.standard_normal(sent.shape).astype(np.float32) * math.sqrt(noise_variance / 2.0) * mask
    received = nc.div(nc.add(nc.mul(sent, gain), noise), gain)
    v_hat = jscc.decode_reals(received, jscc.level_index(k_bar))
    keep = (np.asarray(k_bar) > 0)[..., None].astype(np.float32)
    return nc.add(nc.mul(v_hat, keep), nc.mul(mu, 1.0 - keep))


def allocation_for(config, rates, eta=None):
    """Allocation under ``config``: entropy-driven at ``eta`` (default ``config.eta``) or full."""
    per_patch = rates.per_patch_bits if isinstance(rates, RateReport) else np.asarray(rates, dtype=np.float64)
    if config.allocation == "full":
        return allocate_full(per_patch.shape, config.k_max, config.levels)
    if config.allocation != "entropy":
        raise ValueError(f"unsupported allocation mode {config.allocation!r}")
    return allocate(per_patch, config.eta if eta is None else eta, config.levels)
