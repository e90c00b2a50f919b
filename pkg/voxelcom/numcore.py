"""Dense tensors and a small reverse-mode differentiation engine.

Every differentiable computation in the package (renderer, codec, JSCC heads)
is written with the op kinds registered in ``OPS``. An op kind is a class with
a ``forward`` returning the output array plus whatever it needs to save, and a
``backward`` returning one gradient per input (``None`` for inputs that are
not differentiable, such as integer attributes baked into ``attrs``).

Tensors are float32 by default. Reductions accumulate in float64. The
finite-difference checker in :func:`gradcheck` runs the same ops on float64
tensors.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .exceptions import NumericError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
MAX_AXES = 5

_node_ids = itertools.count()

OPS = {}


def register(kind):
    def decorator(cls):
        cls.kind = kind
        OPS[kind] = cls()
        return cls

    return decorator


class Tensor:
    # lets ndarray.__add__ defer to Tensor.__radd__
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None:
            dtype = DEFAULT_DTYPE
        array = np.array(data, dtype=dtype)
        if array.ndim > MAX_AXES:
            raise ShapeError("tensor", array.shape, detail=f"at most {MAX_AXES} axes")
        _check_finite("tensor", array)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.node = None

    @classmethod
    def _wrap(cls, array, requires_grad):
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = requires_grad
        tensor.name = None
        tensor.node = None
        return tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor._wrap(self.data, requires_grad=False)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple
    saved: dict
    attrs: dict
    id: int = field(default_factory=lambda: next(_node_ids))


@dataclass
class Graph:
    """Tensors reachable from a loss, in reverse topological order."""

    tensors: list

    @classmethod
    def trace(cls, loss):
        seen = set()
        found = []
        stack = [loss]
        while stack:
            tensor = stack.pop()
            if id(tensor) in seen or tensor.node is None:
                continue
            seen.add(id(tensor))
            found.append(tensor)
            stack.extend(tensor.node.inputs)
        # inputs are always created before their outputs
        found.sort(key=lambda t: t.node.id, reverse=True)
        return cls(found)

    def __len__(self):
        return len(self.tensors)


def _check_finite(kind, array):
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NumericError(f"{kind}: {bad} non-finite value(s) in output")


def _lift(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=dtype), requires_grad=False)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def forward_op(kind, *inputs, **attrs):
    try:
        op = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    dtype = next((i.dtype for i in inputs if isinstance(i, Tensor)), DEFAULT_DTYPE)
    tensors = tuple(_lift(i, dtype) for i in inputs)
    out, saved = op.forward([t.data for t in tensors], attrs)
    _check_finite(kind, out)
    requires_grad = any(t.requires_grad for t in tensors)
    result = Tensor._wrap(out, requires_grad)
    if requires_grad:
        result.node = Node(kind, tensors, saved, attrs)
    return result


def backward(loss):
    """Return a map from every leaf tensor with ``requires_grad`` to its gradient."""
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if loss.node is None:
        raise ValueError("backward: loss is not connected to any parameter")
    graph = Graph.trace(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for tensor in graph.tensors:
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue
        node = tensor.node
        op = OPS[node.kind]
        arrays = [t.data for t in node.inputs]
        input_grads = op.backward(grad, arrays, tensor.data, node.attrs, node.saved)
        for source, source_grad in zip(node.inputs, input_grads):
            if source_grad is None or not source.requires_grad:
                continue
            source_grad = np.asarray(source_grad, dtype=source.dtype).reshape(source.shape)
            if source.node is None:
                if id(source) in leaves:
                    leaves[id(source)][1].data += source_grad
                else:
                    leaves[id(source)] = (source, Tensor._wrap(source_grad.copy(), False))
            elif id(source) in pending:
                pending[id(source)] = pending[id(source)] + source_grad
            else:
                pending[id(source)] = source_grad
    return {source: grad for source, grad in leaves.values()}


# --- op kinds ---------------------------------------------------------------


@register("add")
class Add:
    def forward(self, inputs, attrs):
        a, b = inputs
        try:
            return a + b, {}
        except ValueError:
            raise ShapeError("add", a.shape, b.shape) from None

    def backward(self, grad, inputs, out, attrs, saved):
        a, b = inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


@register("sub")
class Sub:
    def forward(self, inputs, attrs):
        a, b = inputs
        try:
            return a - b, {}
        except ValueError:
            raise ShapeError("sub", a.shape, b.shape) from None

    def backward(self, grad, inputs, out, attrs, saved):
        a, b = inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


@register("mul")
class Mul:
    def forward(self, inputs, attrs):
        a, b = inputs
        try:
            return a * b, {}
        except ValueError:
            raise ShapeError("mul", a.shape, b.shape) from None

    def backward(self, grad, inputs, out, attrs, saved):
        a, b = inputs
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


@register("div")
class Div:
    def forward(self, inputs, attrs):
        a, b = inputs
        if np.any(b == 0):
            raise NumericError("div: division by zero")
        try:
            return a / b, {}
        except ValueError:
            raise ShapeError("div", a.shape, b.shape) from None

    def backward(self, grad, inputs, out, attrs, saved):
        a, b = inputs
        return _unbroadcast(grad / b, a.shape), _unbroadcast(-grad * a / (b * b), b.shape)


@register("matmul")
class Matmul:
    def forward(self, inputs, attrs):
        a, b = inputs
        if a.ndim < 2 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError("matmul", a.shape, b.shape)
        return np.matmul(a, b), {}

    def backward(self, grad, inputs, out, attrs, saved):
        a, b = inputs
        if b.ndim == 1:
            grad_a = grad[..., None] * b
            grad_b = np.einsum("...ij,...i->j", a, grad)
            return grad_a, grad_b
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


@register("sparse_matmul")
class SparseMatmul:
    """``attrs['matrix'] @ x`` for a constant scipy sparse matrix."""

    def forward(self, inputs, attrs):
        (x,) = inputs
        matrix = attrs["matrix"]
        if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
            raise ShapeError("sparse_matmul", matrix.shape, x.shape)
        return np.asarray(matrix.astype(x.dtype, copy=False) @ x), {}

    def backward(self, grad, inputs, out, attrs, saved):
        matrix = attrs["matrix"]
        return (np.asarray(matrix.T.astype(grad.dtype, copy=False) @ grad),)


def _conv_output_extent(extent, kernel, stride, padding):
    return (extent + 2 * padding - kernel) // stride + 1


def _conv_validate(kind, x, w, stride, padding):
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(kind, x.shape, w.shape, detail="expected (N,D,H,W,C) and (k,k,k,Cin,Cout)")
    k = w.shape[0]
    if w.shape[:3] != (k, k, k) or k not in (1, 3):
        raise ShapeError(kind, x.shape, w.shape, detail="kernel must be 1 or 3 along every axis")
    if stride not in (1, 2):
        raise ShapeError(kind, x.shape, w.shape, detail=f"stride {stride} not in (1, 2)")
    if padding < 0:
        raise ShapeError(kind, x.shape, w.shape, detail="negative padding")


def _offset_slices(a, b, c, stride, extents):
    return (
        slice(None),
        slice(a, a + stride * extents[0], stride),
        slice(b, b + stride * extents[1], stride),
        slice(c, c + stride * extents[2], stride),
        slice(None),
    )


def _conv_forward(x, w, stride, padding):
    k = w.shape[0]
    out_extents = [_conv_output_extent(n, k, stride, padding) for n in x.shape[1:4]]
    if min(out_extents) < 1:
        raise ShapeError("conv3d", x.shape, w.shape, detail="kernel larger than padded input")
    pad = ((0, 0), (padding, padding), (padding, padding), (padding, padding), (0, 0))
    xp = np.pad(x, pad)
    out = np.zeros((x.shape[0], *out_extents, w.shape[4]), dtype=np.result_type(x, w))
    for a, b, c in itertools.product(range(k), repeat=3):
        out += xp[_offset_slices(a, b, c, stride, out_extents)] @ w[a, b, c]
    return out


def _conv_input_grad(grad, w, stride, padding, in_shape):
    k = w.shape[0]
    padded = (in_shape[0], *(n + 2 * padding for n in in_shape[1:4]), in_shape[4])
    grad_xp = np.zeros(padded, dtype=np.result_type(grad, w))
    out_extents = grad.shape[1:4]
    for a, b, c in itertools.product(range(k), repeat=3):
        grad_xp[_offset_slices(a, b, c, stride, out_extents)] += grad @ w[a, b, c].T
    p = padding
    return grad_xp[:, p : p + in_shape[1], p : p + in_shape[2], p : p + in_shape[3], :]


def _conv_weight_grad(x, grad, w_shape, stride, padding):
    k = w_shape[0]
    pad = ((0, 0), (padding, padding), (padding, padding), (padding, padding), (0, 0))
    xp = np.pad(x, pad)
    out_extents = grad.shape[1:4]
    grad_w = np.zeros(w_shape, dtype=np.float64)
    for a, b, c in itertools.product(range(k), repeat=3):
        patch = xp[_offset_slices(a, b, c, stride, out_extents)]
        grad_w[a, b, c] = np.tensordot(patch, grad, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
    return grad_w


@register("conv3d")
class Conv3d:
    """Channels-last 3D convolution (cross-correlation), cubic kernels."""

    def forward(self, inputs, attrs):
        x, w = inputs
        stride, padding = attrs["stride"], attrs["padding"]
        _conv_validate("conv3d", x, w, stride, padding)
        if x.shape[4] != w.shape[3]:
            raise ShapeError("conv3d", x.shape, w.shape, detail="input channels differ")
        return _conv_forward(x, w, stride, padding), {}

    def backward(self, grad, inputs, out, attrs, saved):
        x, w = inputs
        stride, padding = attrs["stride"], attrs["padding"]
        grad_x = _conv_input_grad(grad, w, stride, padding, x.shape)
        grad_w = _conv_weight_grad(x, grad, w.shape, stride, padding)
        return grad_x, grad_w


@register("conv3d_transpose")
class Conv3dTranspose:
    """Adjoint of ``conv3d``: maps a (N,d,h,w,Cout) tensor back to ``output_shape``.

    ``w`` has the layout of the forward convolution it inverts,
    (k, k, k, C_result, C_input).
    """

    def forward(self, inputs, attrs):
        y, w = inputs
        stride, padding = attrs["stride"], attrs["padding"]
        spatial = tuple(attrs["output_shape"])
        _conv_validate("conv3d_transpose", y, w, stride, padding)
        if y.shape[4] != w.shape[4]:
            raise ShapeError("conv3d_transpose", y.shape, w.shape, detail="input channels differ")
        k = w.shape[0]
        expected = tuple(_conv_output_extent(n, k, stride, padding) for n in spatial)
        if expected != y.shape[1:4]:
            raise ShapeError(
                "conv3d_transpose", y.shape, w.shape, detail=f"output {spatial} does not map to {y.shape[1:4]}"
            )
        in_shape = (y.shape[0], *spatial, w.shape[3])
        return _conv_input_grad(y, w, stride, padding, in_shape), {}

    def backward(self, grad, inputs, out, attrs, saved):
        y, w = inputs
        stride, padding = attrs["stride"], attrs["padding"]
        grad_y = _conv_forward(grad, w, stride, padding)
        grad_w = _conv_weight_grad(grad, y, w.shape, stride, padding)
        return grad_y, grad_w


@register("leaky_relu")
class LeakyRelu:
    def forward(self, inputs, attrs):
        (x,) = inputs
        slope = attrs.get("slope", 0.01)
        return np.where(x > 0, x, x * x.dtype.type(slope)), {}

    def backward(self, grad, inputs, out, attrs, saved):
        (x,) = inputs
        return (grad * np.where(x > 0, 1.0, attrs.get("slope", 0.01)),)


@register("softplus")
class Softplus:
    def forward(self, inputs, attrs):
        (x,) = inputs
        return np.logaddexp(x.dtype.type(0), x), {}

    def backward(self, grad, inputs, out, attrs, saved):
        (x,) = inputs
        return (grad * special.expit(x),)


@register("exp")
class Exp:
    def forward(self, inputs, attrs):
        (x,) = inputs
        with np.errstate(over="ignore"):
            return np.exp(x), {}

    def backward(self, grad, inputs, out, attrs, saved):
        return (grad * out,)


@register("log")
class Log:
    def forward(self, inputs, attrs):
        (x,) = inputs
        if np.any(x <= 0):
            raise NumericError("log: input must be strictly positive")
        return np.log(x), {}

    def backward(self, grad, inputs, out, attrs, saved):
        (x,) = inputs
        return (grad / x,)


@register("sqrt")
class Sqrt:
    def forward(self, inputs, attrs):
        (x,) = inputs
        if np.any(x < 0):
            raise NumericError("sqrt: negative input")
        return np.sqrt(x), {}

    def backward(self, grad, inputs, out, attrs, saved):
        if np.any(out == 0):
            raise NumericError("sqrt: gradient undefined at 0")
        return (grad * 0.5 / out,)


@register("abs")
class Abs:
    def forward(self, inputs, attrs):
        (x,) = inputs
        return np.abs(x), {}

    def backward(self, grad, inputs, out, attrs, saved):
        (x,) = inputs
        return (grad * np.sign(x),)


@register("clamp")
class Clamp:
    def forward(self, inputs, attrs):
        (x,) = inputs
        return np.clip(x, attrs.get("lo"), attrs.get("hi")), {}

    def backward(self, grad, inputs, out, attrs, saved):
        (x,) = inputs
        lo, hi = attrs.get("lo"), attrs.get("hi")
        keep = np.ones(x.shape, dtype=bool)
        if lo is not None:
            keep &= x >= lo
        if hi is not None:
            keep &= x <= hi
        return (grad * keep,)


@register("ndtr")
class Ndtr:
    """Standard normal CDF."""

    def forward(self, inputs, attrs):
        (x,) = inputs
        return special.ndtr(x), {}

    def backward(self, grad, inputs, out, attrs, saved):
        (x,) = inputs
        return (grad * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi),)


@register("reduce_sum")
class ReduceSum:
    def forward(self, inputs, attrs):
        (x,) = inputs
        total = np.sum(x, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False), dtype=np.float64)
        return np.asarray(total, dtype=x.dtype), {}

    def backward(self, grad, inputs, out, attrs, saved):
        (x,) = inputs
        axis = attrs.get("axis")
        if axis is not None and not attrs.get("keepdims", False):
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, x.shape),)


@register("cumsum")
class Cumsum:
    def forward(self, inputs, attrs):
        (x,) = inputs
        return np.cumsum(x, axis=attrs["axis"], dtype=np.float64).astype(x.dtype), {}

    def backward(self, grad, inputs, out, attrs, saved):
        axis = attrs["axis"]
        return (np.flip(np.cumsum(np.flip(grad, axis), axis=axis), axis),)


@register("reshape")
class Reshape:
    def forward(self, inputs, attrs):
        (x,) = inputs
        try:
            return x.reshape(attrs["shape"]), {}
        except ValueError:
            raise ShapeError("reshape", x.shape, attrs["shape"]) from None

    def backward(self, grad, inputs, out, attrs, saved):
        (x,) = inputs
        return (grad.reshape(x.shape),)


@register("transpose")
class Transpose:
    def forward(self, inputs, attrs):
        (x,) = inputs
        return np.transpose(x, attrs["axes"]), {}

    def backward(self, grad, inputs, out, attrs, saved):
        return (np.transpose(grad, np.argsort(attrs["axes"])),)


@register("slice")
class Slice:
    def forward(self, inputs, attrs):
        (x,) = inputs
        return x[attrs["index"]], {}

    def backward(self, grad, inputs, out, attrs, saved):
        (x,) = inputs
        grad_x = np.zeros(x.shape, dtype=grad.dtype)
        np.add.at(grad_x, attrs["index"], grad)
        return (grad_x,)


@register("concat")
class Concat:
    def forward(self, inputs, attrs):
        try:
            return np.concatenate(inputs, axis=attrs["axis"]), {}
        except ValueError:
            raise ShapeError("concat", *(x.shape for x in inputs)) from None

    def backward(self, grad, inputs, out, attrs, saved):
        bounds = np.cumsum([x.shape[attrs["axis"]] for x in inputs])[:-1]
        return tuple(np.split(grad, bounds, axis=attrs["axis"]))


def _merge(x, r, kind):
    n, d, h, w, c = x.shape
    if d % r or h % r or w % r:
        raise ShapeError(kind, x.shape, detail=f"spatial extents must be divisible by {r}")
    blocks = x.reshape(n, d // r, r, h // r, r, w // r, r, c)
    return blocks.transpose(0, 1, 3, 5, 2, 4, 6, 7).reshape(n, d // r, h // r, w // r, r * r * r * c)


def _unmerge(y, r, kind):
    n, d, h, w, rc = y.shape
    if rc % (r * r * r):
        raise ShapeError(kind, y.shape, detail=f"last axis must be divisible by {r ** 3}")
    c = rc // (r * r * r)
    blocks = y.reshape(n, d, h, w, r, r, r, c)
    return blocks.transpose(0, 1, 4, 2, 5, 3, 6, 7).reshape(n, d * r, h * r, w * r, c)


@register("patch_merge")
class PatchMerge:
    """Fold each r×r×r spatial neighbourhood into the channel axis."""

    def forward(self, inputs, attrs):
        (x,) = inputs
        if x.ndim != 5:
            raise ShapeError("patch_merge", x.shape, detail="expected (N,D,H,W,C)")
        return _merge(x, attrs["r"], "patch_merge"), {}

    def backward(self, grad, inputs, out, attrs, saved):
        return (_unmerge(grad, attrs["r"], "patch_merge"),)


@register("patch_unmerge")
class PatchUnmerge:
    def forward(self, inputs, attrs):
        (y,) = inputs
        if y.ndim != 5:
            raise ShapeError("patch_unmerge", y.shape, detail="expected (N,D,H,W,C)")
        return _unmerge(y, attrs["r"], "patch_unmerge"), {}

    def backward(self, grad, inputs, out, attrs, saved):
        return (_merge(grad, attrs["r"], "patch_unmerge"),)


@register("pwl_cdf")
class PiecewiseLinearCdf:
    """Monotone piecewise-linear CDF per dimension.

    ``x`` is (..., d) and ``raw`` is (d, S), one column per segment. Knot k
    sits at ``x0 + k * spacing`` for k = 0..S; the CDF rises from 0 at the
    first knot to 1 at the last, with the increment on segment j
    proportional to softplus(raw[:, j]).
    Outside the knot range the CDF is flat (0 or 1).
    """

    def forward(self, inputs, attrs):
        x, raw = inputs
        if raw.ndim != 2 or x.shape[-1] != raw.shape[0] or raw.shape[1] < 1:
            raise ShapeError("pwl_cdf", x.shape, raw.shape)
        x0, spacing = attrs["x0"], attrs["spacing"]
        segments = raw.shape[1]
        increments = np.logaddexp(0.0, raw.astype(np.float64))
        total = increments.sum(axis=1, keepdims=True)
        knots = np.concatenate([np.zeros((raw.shape[0], 1)), np.cumsum(increments, axis=1) / total], axis=1)
        position = (x.astype(np.float64) - x0) / spacing
        seg = np.clip(np.floor(position), 0, segments - 1).astype(np.int64)
        frac = np.clip(position - seg, 0.0, 1.0)
        dims = np.broadcast_to(np.arange(raw.shape[0]), x.shape)
        lower = knots[dims, seg]
        upper = knots[dims, seg + 1]
        out = lower + frac * (upper - lower)
        saved = {"seg": seg, "frac": frac, "dims": dims, "increments": increments, "total": total, "knots": knots}
        return out.astype(x.dtype), saved

    def backward(self, grad, inputs, out, attrs, saved):
        x, raw = inputs
        seg, frac, dims = saved["seg"], saved["frac"], saved["dims"]
        knots, increments, total = saved["knots"], saved["increments"], saved["total"]
        spacing = attrs["spacing"]
        position = (x.astype(np.float64) - attrs["x0"]) / spacing
        inside = (position > 0) & (position < knots.shape[1] - 1)
        slope = (knots[dims, seg + 1] - knots[dims, seg]) / spacing
        grad64 = grad.astype(np.float64)
        grad_x = grad64 * slope * inside

        # d out / d knots: (1 - frac) on the lower knot, frac on the upper knot
        grad_knots = np.zeros(knots.shape)
        np.add.at(grad_knots, (dims, seg), grad64 * (1.0 - frac))
        np.add.at(grad_knots, (dims, seg + 1), grad64 * frac)
        # knots[:, j] = cumsum(increments)[:, j-1] / total for j >= 1
        tail = np.flip(np.cumsum(np.flip(grad_knots[:, 1:], axis=1), axis=1), axis=1)
        weighted = (grad_knots[:, 1:] * knots[:, 1:]).sum(axis=1, keepdims=True)
        grad_increments = (tail - weighted) / total
        grad_raw = grad_increments * special.expit(raw.astype(np.float64))
        return grad_x, grad_raw


# --- functional wrappers ------------------------------------------------------


def add(a, b):
    return forward_op("add", a, b)


def sub(a, b):
    return forward_op("sub", a, b)


def mul(a, b):
    return forward_op("mul", a, b)


def div(a, b):
    return forward_op("div", a, b)


def matmul(a, b):
    return forward_op("matmul", a, b)


def sparse_matmul(x, matrix):
    return forward_op("sparse_matmul", x, matrix=matrix)


def conv3d(x, w, stride=1, padding=0):
    return forward_op("conv3d", x, w, stride=stride, padding=padding)


def conv3d_transpose(y, w, output_shape, stride=1, padding=0):
    return forward_op("conv3d_transpose", y, w, stride=stride, padding=padding, output_shape=tuple(output_shape))


def leaky_relu(x, slope=0.01):
    return forward_op("leaky_relu", x, slope=slope)


def softplus(x):
    return forward_op("softplus", x)


def exp(x):
    return forward_op("exp", x)


def log(x):
    return forward_op("log", x)


def sqrt(x):
    return forward_op("sqrt", x)


def absolute(x):
    return forward_op("abs", x)


def clamp(x, lo=None, hi=None):
    return forward_op("clamp", x, lo=lo, hi=hi)


def ndtr(x):
    return forward_op("ndtr", x)


def reduce_sum(x, axis=None, keepdims=False):
    return forward_op("reduce_sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None):
    count = x.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis=axis), 1.0 / count)


def cumsum(x, axis):
    return forward_op("cumsum", x, axis=axis)


def reshape(x, shape):
    return forward_op("reshape", x, shape=tuple(shape))


def transpose(x, axes):
    return forward_op("transpose", x, axes=tuple(axes))


def take(x, index):
    if not isinstance(index, tuple):
        index = (index,)
    return forward_op("slice", x, index=index)


def concat(tensors, axis=0):
    return forward_op("concat", *tensors, axis=axis)


def patch_merge(x, r):
    return forward_op("patch_merge", x, r=r)


def patch_unmerge(y, r):
    return forward_op("patch_unmerge", y, r=r)


def pwl_cdf(x, raw, x0, spacing):
    return forward_op("pwl_cdf", x, raw, x0=x0, spacing=spacing)


def mse(a, b):
    diff = sub(a, b)
    return mean(mul(diff, diff))


# --- optimisation -------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Apply one bias-corrected Adam update in place.

    ``params`` maps names to tensors, ``grads`` maps the same names to arrays
    (a missing name counts as a zero gradient).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, param in params.items():
        grad = grads.get(name)
        if isinstance(grad, Tensor):
            grad = grad.data
        grad = np.zeros(param.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise ShapeError("adam_step", param.shape, grad.shape)
        m = state.m.get(name, np.zeros(param.shape))
        v = state.v.get(name, np.zeros(param.shape))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data = (param.data - update).astype(param.dtype)
        _check_finite(f"adam_step[{name}]", param.data)
    return state


def learning_rate(base_lr, step, total, warmup_frac=0.02, decay=0.1):
    """Linear warm-up then exponential decay to ``base_lr * decay`` at ``total``."""
    warmup = max(1, int(round(warmup_frac * total)))
    ramp = min(1.0, (step + 1) / warmup)
    return base_lr * ramp * decay ** (step / max(total, 1))


# --- finite-difference oracle -------------------------------------------------


def gradcheck(fn, *arrays, eps=1e-3):
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps float64 tensors to a scalar tensor. The error for each input is
    ``max|analytic - numeric| / max(max|numeric|, max|analytic|)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    grads = backward(fn(*tensors))
    worst = 0.0
    for position, base in enumerate(arrays):
        analytic = grads[tensors[position]].data if tensors[position] in grads else np.zeros(base.shape)
        numeric = np.zeros(base.shape)
        trial = base.copy()
        for i in range(trial.size):
            original = trial.flat[i]
            values = []
            for shifted in (original + eps, original - eps):
                trial.flat[i] = shifted
                inputs = [Tensor(trial if j == position else a, dtype=np.float64) for j, a in enumerate(arrays)]
                values.append(float(fn(*inputs).item()))
            trial.flat[i] = original
            numeric.flat[i] = (values[0] - values[1]) / (2.0 * eps)
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
        if scale > 0:
            worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst
