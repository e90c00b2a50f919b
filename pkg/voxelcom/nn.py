"""Layers built from numcore ops, and the named parameter sets that own them."""
import logging
import math

import numpy as np

from . import numcore as nc
from .exceptions import FormatError
from .storage import read_checkpoint, write_checkpoint

logger = logging.getLogger(__name__)


def init_uniform(shape, fan_in, seed, index):
    """Uniform in [-b, b], b = sqrt(1 / fan_in), from a stream fixed by (seed, index)."""
    bound = math.sqrt(1.0 / fan_in)
    rng = np.random.default_rng([seed, index])
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ParameterSet(dict):
    """Ordered ``name -> Tensor`` map of trainable values."""

    def __init__(self, seed=0):
        super().__init__()
        self.seed = seed
        self._layers = 0

    def next_index(self):
        self._layers += 1
        return self._layers

    def add(self, name, array):
        if name in self:
            raise ValueError(f"duplicate parameter {name!r}")
        self[name] = nc.Tensor(array, requires_grad=True, name=name)
        return self[name]

    def gradients(self, grad_map):
        """Re-key a ``backward`` result by parameter name."""
        return {name: grad_map[t].data for name, t in self.items() if t in grad_map}

    def set_trainable(self, trainable):
        for tensor in self.values():
            tensor.requires_grad = trainable

    def state(self):
        return {name: tensor.data for name, tensor in self.items()}

    def load_state(self, state, prefix=""):
        for name, tensor in self.items():
            key = prefix + name
            if key not in state:
                raise FormatError(f"checkpoint has no tensor {key!r}")
            if state[key].shape != tensor.shape:
                raise FormatError(f"checkpoint tensor {key!r} has shape {state[key].shape}, expected {tensor.shape}")
            tensor.data = np.array(state[key], dtype=tensor.dtype)

    def save(self, path, extra=None):
        tensors = dict(self.state())
        tensors.update(extra or {})
        write_checkpoint(path, tensors)
        logger.debug("saved %d tensors to %s", len(tensors), path)

    def load(self, path):
        self.load_state(read_checkpoint(path))


class Dense:
    def __init__(self, params, name, fan_in, fan_out):
        index = params.next_index()
        self.weight = params.add(f"{name}.weight", init_uniform((fan_in, fan_out), fan_in, params.seed, index))
        self.bias = params.add(f"{name}.bias", np.zeros(fan_out, dtype=np.float32))

    def __call__(self, x):
        return nc.add(nc.matmul(x, self.weight), self.bias)


class Conv3d:
    def __init__(self, params, name, in_channels, out_channels, kernel=3, stride=1):
        index = params.next_index()
        fan_in = kernel**3 * in_channels
        shape = (kernel, kernel, kernel, in_channels, out_channels)
        self.weight = params.add(f"{name}.weight", init_uniform(shape, fan_in, params.seed, index))
        self.bias = params.add(f"{name}.bias", np.zeros(out_channels, dtype=np.float32))
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x):
        y = nc.conv3d(x, self.weight, stride=self.stride, padding=self.padding)
        return nc.add(y, self.bias)


class ConvTranspose3d:
    """Transposed convolution; ``output_shape`` resolves the stride-2 ambiguity."""

    def __init__(self, params, name, in_channels, out_channels, kernel=3, stride=1):
        index = params.next_index()
        fan_in = kernel**3 * in_channels
        shape = (kernel, kernel, kernel, out_channels, in_channels)
        self.weight = params.add(f"{name}.weight", init_uniform(shape, fan_in, params.seed, index))
        self.bias = params.add(f"{name}.bias", np.zeros(out_channels, dtype=np.float32))
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, y, output_shape):
        x = nc.conv3d_transpose(y, self.weight, output_shape, stride=self.stride, padding=self.padding)
        return nc.add(x, self.bias)
