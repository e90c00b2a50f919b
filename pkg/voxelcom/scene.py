"""Procedural voxel scenes, the pinhole camera and the differentiable renderer.

World axes follow grid axes: voxel index (i, j, k) grows along (x, y, z).
Cameras look down their local -z axis with +y up. Density is stored as a raw
logit in channel 0 and becomes sigma = softplus(logit) after interpolation;
channels 1..3 are RGB, clamped to [0, 1].
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import numcore as nc
from .exceptions import ShapeError
from .storage import read_grid, write_grid

logger = logging.getLogger(__name__)

SCENE_KINDS = ("spheres", "sphere", "boxes", "checker_room", "empty")
BACKGROUND = (0.5, 0.5, 0.5)
DEFAULT_BBOX = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)
MAX_EXTENT = 64

# signed distance in voxels -> density logit
SHARPNESS = 20.0
EMPTY_LOGIT = -100.0
SOLID_LOGIT = 30.0


@dataclass
class VoxelFeatureGrid:
    values: nc.Tensor
    bbox: tuple = DEFAULT_BBOX

    def __post_init__(self):
        if not isinstance(self.values, nc.Tensor):
            self.values = nc.Tensor(self.values)
        if self.values.ndim != 4:
            raise ShapeError("VoxelFeatureGrid", self.values.shape, detail="expected (D,H,W,C)")
        self.bbox = tuple(float(b) for b in self.bbox)

    @property
    def dims(self):
        return self.values.shape[:3]

    @property
    def channels(self):
        return self.values.shape[3]

    @property
    def m(self):
        """Source dimension used as the CBR denominator."""
        return int(self.values.size)

    @property
    def voxel_size(self):
        lo, hi = np.array(self.bbox[:3]), np.array(self.bbox[3:])
        return (hi - lo) / np.array(self.dims)

    def density(self):
        return np.logaddexp(0.0, self.values.data[..., 0])

    def trainable(self):
        return VoxelFeatureGrid(nc.Tensor(self.values.data, requires_grad=True, name="grid.values"), self.bbox)

    def detached(self):
        return VoxelFeatureGrid(self.values.detach(), self.bbox)

    def save(self, path):
        write_grid(path, self.values.data, self.bbox)

    @classmethod
    def load(cls, path):
        values, bbox = read_grid(path)
        return cls(nc.Tensor(values), bbox)

    def checkpoint_tensors(self):
        return {"grid.values": self.values.data, "grid.bbox": np.array(self.bbox, dtype=np.float32)}

    @classmethod
    def from_checkpoint(cls, tensors):
        return cls(nc.Tensor(tensors["grid.values"]), tuple(tensors["grid.bbox"].tolist()))


# --- analytic geometry ------------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    color: tuple

    def signed_distance(self, points):
        return self.radius - np.linalg.norm(points - np.asarray(self.center), axis=-1)

    def color_at(self, points):
        return np.broadcast_to(np.asarray(self.color), points.shape)


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple
    color: tuple
    checker: tuple = None
    period: float = 0.25

    def signed_distance(self, points):
        q = np.abs(points - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return -(outside + inside)

    def color_at(self, points):
        base = np.broadcast_to(np.asarray(self.color), points.shape)
        if self.checker is None:
            return base
        parity = np.floor(points / self.period).astype(np.int64).sum(axis=-1) % 2
        return np.where(parity[..., None] == 1, np.asarray(self.checker), base)


@dataclass
class SceneShape:
    """Union of primitives; positive signed distance inside."""

    kind: str
    primitives: list = field(default_factory=list)

    def signed_distance(self, points):
        if not self.primitives:
            return np.full(points.shape[:-1], -np.inf)
        return np.max([p.signed_distance(points) for p in self.primitives], axis=0)

    def color(self, points):
        if not self.primitives:
            return np.zeros(points.shape)
        distances = np.stack([p.signed_distance(points) for p in self.primitives])
        colors = np.stack([p.color_at(points) for p in self.primitives])
        nearest = np.argmax(distances, axis=0)
        return np.take_along_axis(colors, nearest[None, ..., None], axis=0)[0]

    def occupied(self, points):
        return self.signed_distance(points) > 0


def _random_color(rng):
    return tuple(rng.uniform(0.1, 0.9, size=3).round(4).tolist())


def build_shape(kind, seed):
    rng = np.random.default_rng(seed)
    if kind == "empty":
        return SceneShape(kind)
    if kind == "sphere":
        return SceneShape(kind, [Sphere((0.0, 0.0, 0.0), 0.5, (0.8, 0.3, 0.2))])
    if kind == "spheres":
        count = int(rng.integers(3, 6))
        return SceneShape(
            kind,
            [
                Sphere(tuple(rng.uniform(-0.5, 0.5, 3).tolist()), float(rng.uniform(0.15, 0.35)), _random_color(rng))
                for _ in range(count)
            ],
        )
    if kind == "boxes":
        count = int(rng.integers(3, 5))
        return SceneShape(
            kind,
            [
                Box(tuple(rng.uniform(-0.5, 0.5, 3).tolist()), tuple(rng.uniform(0.1, 0.3, 3).tolist()), _random_color(rng))
                for _ in range(count)
            ],
        )
    if kind == "checker_room":
        light, dark = (0.85, 0.85, 0.8), (0.2, 0.25, 0.3)
        return SceneShape(
            kind,
            [
                Box((0.0, -0.9, 0.0), (0.95, 0.08, 0.95), light, checker=dark),
                Box((0.0, 0.0, -0.9), (0.95, 0.95, 0.08), dark, checker=light),
                Sphere(tuple(rng.uniform(-0.2, 0.2, 3).tolist()), float(rng.uniform(0.25, 0.35)), _random_color(rng)),
            ],
        )
    raise ValueError(f"unsupported scene kind {kind!r}; choose one of {', '.join(SCENE_KINDS)}")


def voxel_centers(dims, bbox=DEFAULT_BBOX):
    lo, hi = np.array(bbox[:3]), np.array(bbox[3:])
    size = (hi - lo) / np.array(dims)
    axes = [lo[a] + (np.arange(dims[a]) + 0.5) * size[a] for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def generate_scene(kind, seed, dims=(32, 32, 32), channels=4, bbox=DEFAULT_BBOX):
    """Voxelize an analytic scene; returns ``(grid, shape)``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2 or max(dims) > MAX_EXTENT:
        raise ValueError(f"grid dims {dims} must be three extents in [2, {MAX_EXTENT}]")
    if not 4 <= channels <= 16:
        raise ValueError(f"channels must be in [4, 16], got {channels}")
    shape = build_shape(kind, seed)
    centers = voxel_centers(dims, bbox)
    voxel = float(np.mean((np.array(bbox[3:]) - np.array(bbox[:3])) / np.array(dims)))

    values = np.zeros((*dims, channels), dtype=np.float32)
    with np.errstate(invalid="ignore"):
        logits = np.clip(SHARPNESS * shape.signed_distance(centers) / voxel, EMPTY_LOGIT, SOLID_LOGIT)
    values[..., 0] = logits
    values[..., 1:4] = shape.color(centers)
    if channels > 4:
        rng = np.random.default_rng([seed, 1])
        occupancy = 1.0 / (1.0 + np.exp(-np.clip(logits, -50, 50)))
        frequencies = rng.uniform(0.5, 3.0, size=(channels - 4, 3))
        phases = rng.uniform(0, 2 * math.pi, size=channels - 4)
        values[..., 4:] = occupancy[..., None] * np.sin(centers @ frequencies.T * math.pi + phases)
    logger.debug("generated %s scene seed=%d dims=%s C=%d", kind, seed, dims, channels)
    return VoxelFeatureGrid(nc.Tensor(values), bbox), shape


# --- cameras ---------------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_fov(cls, size, fov_deg):
        focal = 0.5 * size / math.tan(math.radians(fov_deg) / 2.0)
        return cls(focal, size / 2.0, size / 2.0, size, size)


@dataclass
class View:
    pose: np.ndarray
    intrinsics: Intrinsics
    image: np.ndarray = None
    direction_id: int = 0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        rotation = self.pose[:3, :3]
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > 1e-5:
            raise ValueError(f"view {self.direction_id}: pose rotation is not orthonormal")
        if self.intrinsics.focal <= 0 or self.intrinsics.width <= 0 or self.intrinsics.height <= 0:
            raise ValueError(f"view {self.direction_id}: intrinsics must be positive")
        if self.image is not None:
            self.image = np.clip(np.asarray(self.image, dtype=np.float32), 0.0, 1.0)

    def to_record(self, split):
        k = self.intrinsics
        return {
            "direction_id": self.direction_id,
            "split": split,
            "pose": self.pose.reshape(-1).tolist(),
            "focal": k.focal,
            "cx": k.cx,
            "cy": k.cy,
            "width": k.width,
            "height": k.height,
        }

    @classmethod
    def from_record(cls, record, image=None):
        intrinsics = Intrinsics(record["focal"], record["cx"], record["cy"], record["width"], record["height"])
        return cls(np.array(record["pose"]), intrinsics, image, record["direction_id"])


@dataclass
class SceneDataset:
    scene_id: str
    train_views: list
    test_views: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.train_views or not self.test_views:
            raise ValueError("a scene dataset needs at least one train and one test view")
        self.metadata.setdefault("sparse_ratio", len(self.test_views) / len(self.train_views))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    back = eye - target
    back /= np.linalg.norm(back)
    if abs(np.dot(back, up)) > 0.999:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, true_up, back, eye
    return pose


def fibonacci_directions(count):
    index = np.arange(count) + 0.5
    polar = np.arccos(1.0 - 2.0 * index / count)
    azimuth = math.pi * (1.0 + math.sqrt(5.0)) * index
    return np.stack(
        [np.sin(polar) * np.cos(azimuth), np.cos(polar), np.sin(polar) * np.sin(azimuth)],
        axis=-1,
    )


@dataclass
class Rays:
    origins: np.ndarray
    directions: np.ndarray

    def __len__(self):
        return len(self.origins)

    def subset(self, index):
        return Rays(self.origins[index], self.directions[index])


def make_rays(view, pixels=None):
    """One unit-direction ray per pixel centre, or per given (u, v) pixel coordinate."""
    k = view.intrinsics
    if pixels is None:
        v, u = np.meshgrid(np.arange(k.height) + 0.5, np.arange(k.width) + 0.5, indexing="ij")
        pixels = np.stack([u.ravel(), v.ravel()], axis=-1)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    local = np.stack(
        [(pixels[:, 0] - k.cx) / k.focal, -(pixels[:, 1] - k.cy) / k.focal, -np.ones(len(pixels))], axis=-1
    )
    directions = local @ view.pose[:3, :3].T
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    origins = np.broadcast_to(view.pose[:3, 3], directions.shape).copy()
    return Rays(origins, directions)


def make_dataset(grid, scene_id, train_views=16, test_views=32, image_size=32, radius=4.0, fov_deg=30.0, steps=96):
    """Views on a Fibonacci sphere, train and test interleaved, images rendered from ``grid``."""
    total = train_views + test_views
    directions = fibonacci_directions(total)
    train_ids = set(np.floor(np.arange(train_views) * total / train_views).astype(int).tolist())
    intrinsics = Intrinsics.from_fov(image_size, fov_deg)
    train, test = [], []
    for direction_id, direction in enumerate(directions):
        view = View(look_at(radius * direction), intrinsics, direction_id=direction_id)
        view.image = render(grid, view, steps).rgb.data
        (train if direction_id in train_ids else test).append(view)
    logger.info("dataset %s: %d train / %d test views at %dpx", scene_id, len(train), len(test), image_size)
    return SceneDataset(scene_id, train, test, {"image_size": image_size, "steps_per_ray": steps})


# --- rendering -----------------------------------------------------------------------


def ray_box(rays, bbox):
    lo, hi = np.array(bbox[:3]), np.array(bbox[3:])
    d = np.where(rays.directions == 0, 1e-12, rays.directions)
    t0 = (lo - rays.origins) / d
    t1 = (hi - rays.origins) / d
    near = np.maximum(np.minimum(t0, t1).max(axis=-1), 0.0)
    far = np.maximum(t0, t1).min(axis=-1)
    hit = far > near
    return np.where(hit, near, 0.0), np.where(hit, far, 0.0), hit


def interpolation_matrix(points, dims, bbox):
    """Sparse (M, D*H*W) trilinear weights; samples clamp to the outer voxel centres."""
    lo, hi = np.array(bbox[:3]), np.array(bbox[3:])
    dims = np.array(dims)
    size = (hi - lo) / dims
    u = np.clip((points - lo) / size - 0.5, 0.0, dims - 1)
    base = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims - 2, 0))
    frac = u - base
    rows, cols, weights = [], [], []
    index = np.arange(len(points))
    for corner in np.ndindex(2, 2, 2):
        offset = np.array(corner)
        idx = base + offset
        flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
        weight = np.prod(np.where(offset == 1, frac, 1.0 - frac), axis=-1)
        rows.append(index)
        cols.append(flat)
        weights.append(weight)
    return sparse.csr_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(points), int(np.prod(dims))),
    )


@dataclass
class RenderResult:
    rgb: nc.Tensor
    opacity: nc.Tensor


def render_rays(grid, rays, steps, background=BACKGROUND):
    """Alpha-composite ``steps`` midpoint samples per ray between box entry and exit."""
    if steps < 2:
        raise ValueError(f"steps_per_ray must be at least 2, got {steps}")
    count = len(rays)
    near, far, _ = ray_box(rays, grid.bbox)
    delta = (far - near) / steps
    t = near[:, None] + (np.arange(steps) + 0.5)[None, :] * delta[:, None]
    points = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    matrix = interpolation_matrix(points.reshape(-1, 3), grid.dims, grid.bbox)

    dtype = grid.values.dtype
    flat = nc.reshape(grid.values, (-1, grid.channels))
    samples = nc.sparse_matmul(flat, matrix)
    sigma = nc.softplus(nc.reshape(nc.take(samples, (slice(None), 0)), (count, steps)))
    delta_vox = (delta / float(np.mean(grid.voxel_size)))[:, None].astype(dtype)
    tau = nc.mul(sigma, delta_vox)
    through = nc.cumsum(tau, axis=1)
    before = nc.sub(through, tau)
    weights = nc.sub(nc.exp(nc.mul(before, -1.0)), nc.exp(nc.mul(through, -1.0)))
    colors = nc.clamp(nc.reshape(nc.take(samples, (slice(None), slice(1, 4))), (count, steps, 3)), 0.0, 1.0)
    rgb = nc.reduce_sum(nc.mul(nc.reshape(weights, (count, steps, 1)), colors), axis=1)
    remaining = nc.exp(nc.mul(nc.reduce_sum(tau, axis=1, keepdims=True), -1.0))
    rgb = nc.add(rgb, nc.mul(remaining, np.asarray(background, dtype=dtype)))
    opacity = nc.sub(1.0, nc.reshape(remaining, (count,)))
    return RenderResult(rgb, opacity)


def render(grid, view, steps, background=BACKGROUND, chunk=8192):
    """Render a full image of ``view``; gradients flow to ``grid.values``."""
    rays = make_rays(view)
    k = view.intrinsics
    parts = [render_rays(grid, rays.subset(slice(s, s + chunk)), steps, background) for s in range(0, len(rays), chunk)]
    if len(parts) == 1:
        rgb, opacity = parts[0].rgb, parts[0].opacity
    else:
        rgb = nc.concat([p.rgb for p in parts], axis=0)
        opacity = nc.concat([p.opacity for p in parts], axis=0)
    return RenderResult(nc.reshape(rgb, (k.height, k.width, 3)), nc.reshape(opacity, (k.height, k.width)))
