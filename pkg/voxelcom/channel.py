"""AWGN channel and the digital chain: QAM mapping, LDPC coding, AMC.

Gray tables (bit 0 is the first bit of each group):

QPSK   (b0, b1) -> ((1 - 2 b0) + j (1 - 2 b1)) / sqrt(2)
QAM16  (b0, b1, b2, b3) -> ((1 - 2 b0)(1 + 2 b1) + j (1 - 2 b2)(1 + 2 b3)) / sqrt(10)

LLRs are log P(b = 0 | y) - log P(b = 1 | y). The exact demapper evaluates

    LLR_i = logsumexp_{p: b_i(p) = 0}(-|y - p|^2 / s2) - logsumexp_{p: b_i(p) = 1}(-|y - p|^2 / s2)

and the max-log variant replaces logsumexp with max.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
import pyldpc
from django.conf import settings
from scipy import sparse
from scipy.special import logsumexp

from .exceptions import ShapeError

logger = logging.getLogger(__name__)

VARIABLE_DEGREE = 3
MIN_NOISE_VARIANCE = 1e-12
MESSAGE_LIMIT = 1.0 - 1e-12

STANDARD_CODES = {
    Fraction(1, 2): (512, 1024),
    Fraction(2, 3): (512, 768),
    Fraction(3, 4): (576, 768),
}


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float
    seed: int = 0
    h: complex = 1 + 0j

    @property
    def noise_variance(self):
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        return 10.0 ** (-self.snr_db / 10.0)


def noise_variance(snr_db):
    return ChannelConfig(snr_db).noise_variance


def transmit(symbols, config):
    """s~ = h s + n with n ~ CN(0, s2), s2 = 10^(-snr/10)."""
    symbols = np.asarray(symbols, dtype=np.complex128)
    received = config.h * symbols
    variance = config.noise_variance
    if variance == 0.0:
        return received
    rng = np.random.default_rng(config.seed)
    scale = math.sqrt(variance / 2.0)
    noise = scale * (rng.standard_normal(symbols.shape) + 1j * rng.standard_normal(symbols.shape))
    return received + noise


# --- modulation ----------------------------------------------------------------------


class Modulation(Enum):
    QPSK = "QPSK"
    QAM16 = "QAM16"

    @property
    def bits_per_symbol(self):
        return {Modulation.QPSK: 2, Modulation.QAM16: 4}[self]


@lru_cache(maxsize=None)
def constellation(modulation):
    """(points, labels): points[i] carries the bits labels[i], i.e. the binary digits of i."""
    width = modulation.bits_per_symbol
    labels = (np.arange(2**width)[:, None] >> np.arange(width - 1, -1, -1)) & 1
    sign = 1 - 2 * labels
    if modulation is Modulation.QPSK:
        points = (sign[:, 0] + 1j * sign[:, 1]) / math.sqrt(2.0)
    else:
        in_phase = sign[:, 0] * (1 + 2 * labels[:, 1])
        quadrature = sign[:, 2] * (1 + 2 * labels[:, 3])
        points = (in_phase + 1j * quadrature) / math.sqrt(10.0)
    return points, labels.astype(np.uint8)


def qam_map(bits, modulation):
    bits = np.asarray(bits, dtype=np.int64).ravel()
    width = modulation.bits_per_symbol
    if bits.size % width:
        raise ShapeError("qam_map", bits.shape, detail=f"{modulation.value} needs a multiple of {width} bits")
    points, _ = constellation(modulation)
    index = bits.reshape(-1, width) @ (1 << np.arange(width - 1, -1, -1))
    return points[index]


def qam_soft_demap(received, variance, modulation, method="exact"):
    points, labels = constellation(modulation)
    received = np.asarray(received, dtype=np.complex128).ravel()
    metric = -np.abs(received[:, None] - points[None, :]) ** 2 / max(variance, MIN_NOISE_VARIANCE)
    llrs = np.empty((received.size, labels.shape[1]))
    for bit in range(labels.shape[1]):
        zero, one = metric[:, labels[:, bit] == 0], metric[:, labels[:, bit] == 1]
        if method == "maxlog":
            llrs[:, bit] = zero.max(axis=1) - one.max(axis=1)
        elif method == "exact":
            llrs[:, bit] = logsumexp(zero, axis=1) - logsumexp(one, axis=1)
        else:
            raise ValueError(f"unknown demapping method {method!r}")
    return llrs.ravel()


# --- LDPC ------------------------------------------------------------------------------


def progressive_edge_growth(n, m, variable_degree=VARIABLE_DEGREE, seed=0):
    """Parity-check matrix grown one edge at a time, each edge closing the longest possible cycle."""
    rng = np.random.default_rng(seed)
    var_checks = [[] for _ in range(n)]
    check_vars = [[] for _ in range(m)]
    degree = np.zeros(m, dtype=np.int64)
    everything = set(range(m))
    for j in range(n):
        for _ in range(min(variable_degree, m)):
            if not var_checks[j]:
                candidates = everything
            else:
                reached = set(var_checks[j])
                frontier = set(var_checks[j])
                seen_vars = {j}
                while True:
                    next_vars = {v for c in frontier for v in check_vars[c]} - seen_vars
                    seen_vars |= next_vars
                    next_checks = {c for v in next_vars for c in var_checks[v]} - reached
                    if not next_checks or len(reached) + len(next_checks) == m:
                        candidates = everything - reached
                        break
                    reached |= next_checks
                    frontier = next_checks
            lowest = min(degree[c] for c in candidates)
            options = sorted(c for c in candidates if degree[c] == lowest)
            check = int(options[rng.integers(len(options))])
            var_checks[j].append(check)
            check_vars[check].append(j)
            degree[check] += 1
    parity = np.zeros((m, n), dtype=np.uint8)
    for j, checks in enumerate(var_checks):
        parity[checks, j] = 1
    return parity


@dataclass(frozen=True, eq=False)
class LdpcCode:
    """Systematic code: the first ``k`` codeword positions carry the information bits.

    ``generator`` has k_eff >= k rows; positions k..k_eff-1 are always zero.
    """

    parity: np.ndarray
    generator: np.ndarray
    k: int

    @property
    def n_code(self):
        return self.parity.shape[1]

    @property
    def rate(self):
        return Fraction(self.k, self.n_code)

    @property
    def k_eff(self):
        return self.generator.shape[0]

    def __post_init__(self):
        rows, cols = np.nonzero(self.parity)
        edges = len(rows)
        object.__setattr__(self, "edge_checks", rows)
        object.__setattr__(self, "edge_vars", cols)
        object.__setattr__(
            self, "check_incidence", sparse.csr_matrix((np.ones(edges), (np.arange(edges), rows)), shape=(edges, self.parity.shape[0]))
        )
        object.__setattr__(
            self, "var_incidence", sparse.csr_matrix((np.ones(edges), (np.arange(edges), cols)), shape=(edges, self.n_code))
        )
        object.__setattr__(self, "parity_sparse", sparse.csr_matrix(self.parity.astype(np.float64)))

    def syndrome_ok(self, hard):
        """``hard`` is (B, n); True where every parity check is satisfied."""
        return ~np.any(np.asarray(self.parity_sparse @ hard.T.astype(np.float64)) % 2, axis=0).astype(bool)


def _cache_path(k, n, seed):
    directory = getattr(settings, "VOXELCOM_CACHE_DIR", None)
    if not directory:
        return None
    return Path(directory) / f"ldpc_{k}_{n}_{seed}.npz"


@lru_cache(maxsize=32)
def build_ldpc(k, n, seed=0):
    if not 0 < k < n:
        raise ValueError(f"LDPC code needs 0 < k < n, got k={k} n={n}")
    path = _cache_path(k, n, seed)
    if path is not None and path.exists():
        stored = np.load(path)
        return LdpcCode(stored["parity"], stored["generator"], k)
    parity = progressive_edge_growth(n, n - k, seed=seed)
    permuted, generator_t = pyldpc.coding_matrix_systematic(parity.astype(np.int64))
    if sparse.issparse(permuted):
        permuted = permuted.toarray()
    if sparse.issparse(generator_t):
        generator_t = generator_t.toarray()
    permuted = np.asarray(permuted, dtype=np.uint8) % 2
    generator = np.asarray(generator_t, dtype=np.uint8).T % 2
    if generator.shape[0] < k or np.any((permuted.astype(np.int64) @ generator.T.astype(np.int64)) % 2):
        raise RuntimeError(f"PEG construction for ({k}, {n}) did not yield a valid systematic code")
    code = LdpcCode(permuted, generator, k)
    if path is not None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.savez_compressed(path, parity=code.parity, generator=code.generator)
        except OSError as exc:
            logger.warning("could not cache LDPC code at %s: %s", path, exc)
    logger.info("built (%d, %d) LDPC code, %d edges, k_eff=%d", k, n, len(code.edge_vars), code.k_eff)
    return code


def code_dimensions(rate):
    """(k, n) of the standard code for ``rate``."""
    rate = Fraction(rate)
    if rate not in STANDARD_CODES:
        raise ValueError(f"no standard code for rate {rate}; choose one of {sorted(map(str, STANDARD_CODES))}")
    return STANDARD_CODES[rate]


def code_for_rate(rate, seed=0):
    return build_ldpc(*code_dimensions(rate), seed=seed)


def ldpc_encode(info, code):
    """Encode (k,) or (B, k) information bits."""
    info = np.asarray(info, dtype=np.float64)
    single = info.ndim == 1
    info = np.atleast_2d(info)
    if info.shape[1] != code.k:
        raise ShapeError("ldpc_encode", info.shape, (code.k,))
    message = np.zeros((info.shape[0], code.k_eff))
    message[:, : code.k] = info
    codewords = (message @ code.generator.astype(np.float64)) % 2
    codewords = codewords.astype(np.uint8)
    return codewords[0] if single else codewords


def _check_update(v2c, code):
    t = np.tanh(v2c / 2.0)
    magnitude = np.log(np.maximum(np.abs(t), 1e-300))
    negative = (t < 0).astype(np.float64)
    total_magnitude = np.asarray(code.check_incidence.T @ magnitude.T).T
    total_negative = np.asarray(code.check_incidence.T @ negative.T).T
    rows = code.edge_checks
    others = np.exp(total_magnitude[:, rows] - magnitude)
    sign = 1.0 - 2.0 * ((total_negative[:, rows] - negative) % 2)
    return 2.0 * np.arctanh(np.clip(sign * others, -MESSAGE_LIMIT, MESSAGE_LIMIT))


def ldpc_decode(llrs, code, max_iters=50):
    """Sum-product decoding of (n,) or (B, n) LLRs; returns ``(info_bits, converged)``."""
    llrs = np.asarray(llrs, dtype=np.float64)
    single = llrs.ndim == 1
    llrs = np.atleast_2d(llrs)
    if llrs.shape[1] != code.n_code:
        raise ShapeError("ldpc_decode", llrs.shape, (code.n_code,))
    decided = llrs < 0
    converged = code.syndrome_ok(decided)
    v2c = llrs[:, code.edge_vars].copy()
    for _ in range(max_iters):
        active = np.flatnonzero(~converged)
        if active.size == 0:
            break
        c2v = _check_update(v2c[active], code)
        total = llrs[active] + np.asarray(code.var_incidence.T @ c2v.T).T
        v2c[active] = total[:, code.edge_vars] - c2v
        hard = total < 0
        decided[active] = hard
        converged[active] = code.syndrome_ok(hard)
    info = decided[:, : code.k].astype(np.uint8)
    if single:
        return info[0], bool(converged[0])
    return info, converged


# --- adaptive modulation and coding -----------------------------------------------------


@dataclass(frozen=True)
class McsEntry:
    min_snr_db: float
    modulation: Modulation
    code_rate: Fraction

    @property
    def spectral_efficiency(self):
        return self.modulation.bits_per_symbol * float(self.code_rate)

    def describe(self):
        return f"{self.modulation.value} r={self.code_rate}"


@dataclass(frozen=True)
class McsTable:
    entries: tuple

    def __post_init__(self):
        if not self.entries:
            raise ValueError("MCS table is empty")
        thresholds = [e.min_snr_db for e in self.entries]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError(f"MCS thresholds must be strictly increasing, got {thresholds}")

    @classmethod
    def from_rows(cls, rows):
        return cls(tuple(McsEntry(float(snr), Modulation(mod), Fraction(rate)) for snr, mod, rate in rows))

    def to_rows(self):
        return [[e.min_snr_db, e.modulation.value, str(e.code_rate)] for e in self.entries]


DEFAULT_MCS_ROWS = ((2.5, "QPSK", "1/2"), (5.5, "QPSK", "3/4"), (7.5, "QAM16", "1/2"), (10.0, "QAM16", "2/3"))


def select_mcs(table, snr_est_db):
    """Highest entry whose threshold is at or below the estimate; the first entry otherwise."""
    chosen = table.entries[0]
    for entry in table.entries:
        if entry.min_snr_db <= snr_est_db:
            chosen = entry
    return chosen


@dataclass
class DigitalResult:
    bits: np.ndarray
    symbols: int
    blocks: int
    failed_blocks: int


def coded_symbol_count(n_bits, entry):
    """Channel symbols for ``n_bits`` in whole LDPC blocks; needs no parity matrix."""
    k, n = code_dimensions(entry.code_rate)
    blocks = max(1, -(-n_bits // k))
    return blocks * n // entry.modulation.bits_per_symbol


def transmit_bits(bits, entry, snr_db, seed=0, max_iters=50, code=None, demap="exact"):
    """Send a bitstream through LDPC blocks, QAM and AWGN, and decode it."""
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    code = code or code_for_rate(entry.code_rate)
    blocks = max(1, -(-bits.size // code.k))
    padded = np.zeros(blocks * code.k, dtype=np.uint8)
    padded[: bits.size] = bits
    codewords = ldpc_encode(padded.reshape(blocks, code.k), code)
    symbols = qam_map(codewords.ravel(), entry.modulation)
    channel = ChannelConfig(snr_db, seed)
    received = transmit(symbols, channel)
    llrs = qam_soft_demap(received, channel.noise_variance, entry.modulation, method=demap)
    decoded, converged = ldpc_decode(llrs.reshape(blocks, code.n_code), code, max_iters)
    return DigitalResult(decoded.ravel()[: bits.size], symbols.size, blocks, int(np.count_nonzero(~converged)))


SIDE_ENTRY = McsEntry(-math.inf, Modulation.QPSK, Fraction(1, 2))


def side_code(n_bits, seed=0):
    """Rate-1/2 code sized to a side-information block."""
    return build_ldpc(n_bits, 2 * n_bits, seed=seed)


def transmit_side_bits(bits, snr_db, seed=0, max_iters=50):
    bits = np.asarray(bits, dtype=np.uint8)
    return transmit_bits(bits, SIDE_ENTRY, snr_db, seed, max_iters, code=side_code(bits.size))


def side_symbol_count(n_bits):
    """Rate 1/2 then 2 bits per QPSK symbol: one symbol per side-information bit."""
    return n_bits


# --- Monte Carlo ---------------------------------------------------------------------


def ber_sweep(modulation, rate, snr_grid, n_bits, seed=0, max_iters=50):
    entry = McsEntry(0.0, Modulation(modulation), Fraction(rate))
    code = code_for_rate(entry.code_rate)
    rows = []
    for position, snr in enumerate(snr_grid):
        rng = np.random.default_rng([seed, position])
        bits = rng.integers(0, 2, size=n_bits, dtype=np.uint8)
        result = transmit_bits(bits, entry, snr, seed=int(rng.integers(2**31)), max_iters=max_iters, code=code)
        errors = int(np.count_nonzero(result.bits != bits))
        rows.append(
            {
                "snr_db": float(snr),
                "modulation": entry.modulation.value,
                "rate": str(entry.code_rate),
                "bits": n_bits,
                "errors": errors,
                "ber": errors / n_bits,
            }
        )
        logger.info("BER %s r=%s @ %.1f dB: %d/%d", entry.modulation.value, entry.code_rate, snr, errors, n_bits)
    return rows


def calibrate_mcs(table, snr_grid, n_bits, target_ber=1e-5, seed=0, max_iters=50):
    """Re-derive each entry's threshold as the lowest grid SNR with BER below ``target_ber``."""
    snr_grid = sorted(snr_grid)
    thresholds = []
    for entry in table.entries:
        rows = ber_sweep(entry.modulation, entry.code_rate, snr_grid, n_bits, seed, max_iters)
        passing = [row["snr_db"] for row in rows if row["ber"] < target_ber]
        if passing:
            thresholds.append(passing[0])
        else:
            logger.warning("%s never reached BER %.0e on the sweep grid", entry.describe(), target_ber)
            thresholds.append(snr_grid[-1] + 1.0)
    calibrated = []
    previous = -math.inf
    for entry, threshold in zip(table.entries, thresholds):
        threshold = max(threshold, previous + 0.5)
        calibrated.append(McsEntry(threshold, entry.modulation, entry.code_rate))
        previous = threshold
    return McsTable(tuple(calibrated))
