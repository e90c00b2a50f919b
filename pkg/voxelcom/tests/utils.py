import unittest

from django.conf import settings
from django.test import tag

from voxelcom.codec import CodecConfig, FeatureCodec
from voxelcom.jscc import JsccCodec, JsccConfig
from voxelcom.scene import generate_scene


def slow(test):
    """Tag a test as slow; it only runs with VOXELCOM_SLOW_TESTS=1."""
    skipped = unittest.skipUnless(settings.VOXELCOM_SLOW_TESTS, "set VOXELCOM_SLOW_TESTS=1 to run")(test)
    return tag("slow")(skipped)


def identity_codec(channels=4, d_z=4):
    return FeatureCodec(CodecConfig(kind="identity", channels=channels, d_z=d_z, hyper_hidden=8))


def identity_jscc(levels=(0, 32, 64, 128), k_max=128, allocation="entropy", d_v=256):
    config = JsccConfig(kind="identity", q_levels=levels, k_max=k_max, allocation=allocation)
    return JsccCodec(config, d_v)


def small_grid(kind="sphere", seed=0, extent=8, channels=4):
    grid, _ = generate_scene(kind, seed, dims=(extent, extent, extent), channels=channels)
    return grid
