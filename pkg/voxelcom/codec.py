"""Nonlinear transform coding of voxel feature grids.

``analysis`` maps a (D, H, W, C) grid to P transmission patches of width d_v
(stride-2 conv, stride-1 conv, 2x2x2 patch merge, dense projection), and
``synthesis`` mirrors it. A hyperprior summarises the patches of one grid in
a single d_z vector z; decoding z together with each patch position gives a
Gaussian (mu, sigma) for every latent element. The probability of a latent
element is the Gaussian mass of the unit bin around it, and z itself is
priced with a learned piecewise-linear CDF per dimension.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .exceptions import ShapeError
from .nn import Dense, Conv3d, ConvTranspose3d, ParameterSet

logger = logging.getLogger(__name__)

CODEC_KINDS = ("conv", "identity")
DOWNSAMPLE = 4
P_MIN = 2.0**-32
LN2 = math.log(2.0)


@dataclass(frozen=True)
class CodecConfig:
    kind: str = "conv"
    channels: int = 4
    widths: tuple = (16, 32)
    d_v: int = 32
    d_z: int = 16
    hyper_hidden: int = 32
    sigma_min: float = 1e-3
    lam: float = 1e-3
    lambdas: tuple = (1e-4, 1e-3, 1e-2)
    cdf_knots: int = 10
    cdf_range: float = 8.0
    seed: int = 0

    @property
    def latent_width(self):
        if self.kind == "identity":
            return DOWNSAMPLE**3 * self.channels
        return self.d_v


@dataclass
class LatentPatches:
    values: nc.Tensor
    lattice: tuple

    @property
    def count(self):
        return self.values.shape[1]

    @property
    def d_v(self):
        return self.values.shape[2]

    @property
    def spatial_index(self):
        """(P, 3) lattice coordinates (depth, row, col) in patch order."""
        return np.indices(self.lattice).reshape(3, -1).T


@dataclass
class HyperPrior:
    z: nc.Tensor
    mu: nc.Tensor
    sigma: nc.Tensor


@dataclass
class RateReport:
    per_patch_bits: np.ndarray
    R_v: float
    R_z: float

    @classmethod
    def from_bits(cls, per_patch_bits, z_bits=0.0):
        per_patch_bits = np.asarray(per_patch_bits, dtype=np.float64)
        return cls(per_patch_bits, float(per_patch_bits.sum()), float(z_bits))


@dataclass
class RateTerms:
    """Differentiable rates for a batch of grids: (N, P) patch bits, (N,) totals."""

    per_patch: nc.Tensor
    R_v: nc.Tensor
    R_z: nc.Tensor

    def report(self, index=0):
        return RateReport.from_bits(self.per_patch.data[index], float(self.R_z.data[index]))


def likelihood(v, mu, sigma, p_min=P_MIN):
    """Mass of N(mu, sigma^2) on the unit bin centred at v, floored at ``p_min``.

    Evaluated through |v - mu| so both bin edges stay on the side of the mode
    where the normal CDF is accurate.
    """
    centred = nc.absolute(nc.sub(v, mu))
    upper = nc.ndtr(nc.div(nc.sub(0.5, centred), sigma))
    lower = nc.ndtr(nc.div(nc.sub(-0.5, centred), sigma))
    return nc.clamp(nc.sub(upper, lower), lo=p_min)


def bits(probability):
    return nc.mul(nc.log(probability), -1.0 / LN2)


def lattice_coordinates(lattice):
    """(P, 3) patch centres in patch order, scaled to (-1, 1) per axis."""
    extents = np.asarray(lattice, dtype=np.float32)
    index = np.indices(lattice).reshape(3, -1).T.astype(np.float32)
    return (2.0 * (index + 0.5) / extents - 1.0).astype(np.float32)


def check_divisible(dims):
    remainder = [d % DOWNSAMPLE for d in dims]
    if any(remainder):
        padded = tuple(d + (-d) % DOWNSAMPLE for d in dims)
        raise ShapeError("analysis", tuple(dims), detail=f"pad the grid to {padded} (multiples of {DOWNSAMPLE})")


class FeatureCodec:
    def __init__(self, config, params=None):
        self.config = config
        self.params = params if params is not None else ParameterSet(seed=config.seed)
        width = config.latent_width
        c = config.channels
        if config.kind == "conv":
            w0, w1 = config.widths
            self.analysis_layers = (
                Conv3d(self.params, "codec.ga.conv1", c, w0, kernel=3, stride=2),
                Conv3d(self.params, "codec.ga.conv2", w0, w1, kernel=3, stride=1),
                Dense(self.params, "codec.ga.proj", 8 * w1, width),
            )
            self.synthesis_layers = (
                Dense(self.params, "codec.gs.proj", width, 8 * w1),
                ConvTranspose3d(self.params, "codec.gs.conv2", w1, w0, kernel=3, stride=1),
                ConvTranspose3d(self.params, "codec.gs.conv1", w0, c, kernel=3, stride=2),
            )
        elif config.kind != "identity":
            raise ValueError(f"unsupported codec kind {config.kind!r}")
        self.hyper_analysis = (
            Dense(self.params, "codec.ha.fc1", 2 * width, config.hyper_hidden),
            Dense(self.params, "codec.ha.fc2", config.hyper_hidden, config.d_z),
        )
        self.hyper_synthesis = (
            Dense(self.params, "codec.hs.fc1", config.d_z, config.hyper_hidden),
            Dense(self.params, "codec.hs.pos", 3, config.hyper_hidden),
            Dense(self.params, "codec.hs.fc2", config.hyper_hidden, 2 * width),
        )
        self.z_cdf = self.params.add("codec.z_cdf", np.zeros((config.d_z, config.cdf_knots - 1), dtype=np.float32))

    def analysis(self, grid_values):
        """Accepts a VoxelFeatureGrid or a (N, D, H, W, C) tensor."""
        x = getattr(grid_values, "values", grid_values)
        if x.ndim == 4:
            x = nc.reshape(x, (1, *x.shape))
        n, *dims, c = x.shape
        check_divisible(dims)
        if c != self.config.channels:
            raise ShapeError("analysis", x.shape, detail=f"codec expects {self.config.channels} channels")
        lattice = tuple(d // DOWNSAMPLE for d in dims)
        if self.config.kind == "identity":
            merged = nc.patch_merge(x, DOWNSAMPLE)
        else:
            conv1, conv2, proj = self.analysis_layers
            h = nc.leaky_relu(conv1(x))
            h = nc.leaky_relu(conv2(h))
            merged = proj(nc.patch_merge(h, 2))
        v = nc.reshape(merged, (n, int(np.prod(lattice)), self.config.latent_width))
        return LatentPatches(v, lattice)

    def synthesis(self, patches):
        """Returns a (N, D, H, W, C) tensor."""
        v = patches.values
        n, count, width = v.shape
        if count != int(np.prod(patches.lattice)) or width != self.config.latent_width:
            raise ShapeError("synthesis", v.shape, detail=f"lattice {patches.lattice}, d_v {self.config.latent_width}")
        if self.config.kind == "identity":
            return nc.patch_unmerge(nc.reshape(v, (n, *patches.lattice, width)), DOWNSAMPLE)
        proj, deconv2, deconv1 = self.synthesis_layers
        half = tuple(2 * e for e in patches.lattice)
        full = tuple(DOWNSAMPLE * e for e in patches.lattice)
        h = nc.leaky_relu(proj(v))
        h = nc.patch_unmerge(nc.reshape(h, (n, *patches.lattice, h.shape[-1])), 2)
        h = nc.leaky_relu(deconv2(h, half))
        return deconv1(h, full)

    def hyper_encode(self, patches):
        v = patches.values
        count = v.shape[1]
        pooled = nc.concat(
            [
                nc.mul(nc.reduce_sum(v, axis=1), 1.0 / count),
                nc.mul(nc.reduce_sum(nc.absolute(v), axis=1), 1.0 / count),
            ],
            axis=1,
        )
        fc1, fc2 = self.hyper_analysis
        return fc2(nc.leaky_relu(fc1(pooled)))

    def hyper_decode(self, z, lattice):
        """(N, P, d_v) mean and scale for the patches of ``lattice``.

        The hidden layer is shared; each patch adds an embedding of its
        lattice coordinate before the output projection.
        """
        fc1, pos, fc2 = self.hyper_synthesis
        n = z.shape[0]
        hidden = nc.reshape(fc1(z), (n, 1, self.config.hyper_hidden))
        out = fc2(nc.leaky_relu(nc.add(hidden, pos(lattice_coordinates(lattice)))))
        width = self.config.latent_width
        mu = nc.take(out, (slice(None), slice(None), slice(0, width)))
        raw = nc.take(out, (slice(None), slice(None), slice(width, 2 * width)))
        sigma = nc.add(nc.softplus(raw), self.config.sigma_min)
        return HyperPrior(z, mu, sigma)

    def hyperprior(self, patches, quantize=True):
        """Hyperprior as the receiver sees it: decoded from round(z)."""
        z = self.hyper_encode(patches)
        if quantize:
            z = quantize_z(z.data)
        return self.hyper_decode(z, patches.lattice)

    def z_bits(self, z):
        spacing = 2.0 * self.config.cdf_range / (self.config.cdf_knots - 1)
        x0 = -self.config.cdf_range
        upper = nc.pwl_cdf(nc.add(z, 0.5), self.z_cdf, x0, spacing)
        lower = nc.pwl_cdf(nc.sub(z, 0.5), self.z_cdf, x0, spacing)
        return bits(nc.clamp(nc.sub(upper, lower), lo=P_MIN))

    def rate_terms(self, values, prior, z=None):
        """Rates of (N, P, d_v) latent values and of ``z`` (default ``prior.z``)."""
        element_bits = bits(likelihood(values, prior.mu, prior.sigma))
        per_patch = nc.reduce_sum(element_bits, axis=2)
        z = prior.z if z is None else z
        if z.shape[-1] == 0:
            z_total = nc.Tensor(np.zeros(per_patch.shape[0]))
        else:
            z_total = nc.reduce_sum(self.z_bits(z), axis=1)
        return RateTerms(per_patch, nc.reduce_sum(per_patch, axis=1), z_total)

    def rate_report(self, patches, prior):
        if prior.mu.shape[-1] != patches.d_v or prior.mu.shape[1] not in (1, patches.count):
            raise ShapeError("rate_report", patches.values.shape, prior.mu.shape)
        return self.rate_terms(patches.values.detach(), _detached(prior)).report()

    def save(self, path):
        self.params.save(path)

    def load(self, path):
        self.params.load(path)


def _detached(prior):
    return HyperPrior(prior.z.detach(), prior.mu.detach(), prior.sigma.detach())


def quantize_z(z):
    """8-bit uniform quantiser (unit step) used for z in the side information."""
    return nc.Tensor(np.clip(np.round(np.asarray(z)), -128, 127))


def standard_prior(width):
    """Fixed N(0, 1) prior used as the reference against the learned hyperprior."""
    zero = nc.Tensor(np.zeros((1, 1, width)))
    return HyperPrior(nc.Tensor(np.zeros((1, 0))), zero, nc.Tensor(np.ones((1, 1, width))))
