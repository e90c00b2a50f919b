"""On-disk formats: checkpoints, scene grids, views, images, frames, logs, manifests.

All binary layouts are little-endian.

VCKP  ``b"VCKP" u16 version u32 count`` then per tensor
      ``u16 name_len name u8 ndim u32[ndim] shape f32[...] payload``
VFG1  ``b"VFG1" u32 D u32 H u32 W u32 C f32[6] bbox f32[D*H*W*C] values``
NFRM  ``b"NFRM" u32 P u8[P] level_index u16 side_len u8[ceil(side_len/8)] side_bits
      f32[2*n] (I, Q) payload``
"""
import csv
import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import FormatError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VCKP"
CHECKPOINT_VERSION = 1
GRID_MAGIC = b"VFG1"
FRAME_MAGIC = b"NFRM"


class _Reader:
    def __init__(self, blob, label):
        self.blob = blob
        self.offset = 0
        self.label = label

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.blob):
            raise FormatError(f"{self.label}: truncated at byte {self.offset}")
        values = struct.unpack_from(fmt, self.blob, self.offset)
        self.offset += size
        return values

    def array(self, count, dtype):
        dtype = np.dtype(dtype)
        size = count * dtype.itemsize
        if self.offset + size > len(self.blob):
            raise FormatError(f"{self.label}: truncated payload at byte {self.offset}")
        values = np.frombuffer(self.blob, dtype=dtype, count=count, offset=self.offset).copy()
        self.offset += size
        return values

    def expect_magic(self, magic):
        if self.blob[: len(magic)] != magic:
            raise FormatError(f"{self.label}: bad magic {self.blob[:len(magic)]!r}, expected {magic!r}")
        self.offset = len(magic)


# --- checkpoints --------------------------------------------------------------


def write_checkpoint(path, tensors):
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        parts.append(array.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path):
    reader = _Reader(Path(path).read_bytes(), str(path))
    reader.expect_magic(CHECKPOINT_MAGIC)
    version, count = reader.take("<HI")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.take("<H")
        name = reader.blob[reader.offset : reader.offset + name_len].decode("utf-8")
        reader.offset += name_len
        (ndim,) = reader.take("<B")
        shape = reader.take(f"<{ndim}I")
        tensors[name] = reader.array(int(np.prod(shape, dtype=np.int64)), "<f4").reshape(shape)
    return tensors


# --- scene grids and views ------------------------------------------------------


def write_grid(path, values, bbox):
    values = np.asarray(values, dtype="<f4")
    header = GRID_MAGIC + struct.pack("<4I6f", *values.shape, *bbox)
    Path(path).write_bytes(header + values.tobytes())


def read_grid(path):
    reader = _Reader(Path(path).read_bytes(), str(path))
    reader.expect_magic(GRID_MAGIC)
    d, h, w, c, *bbox = reader.take("<4I6f")
    values = reader.array(d * h * w * c, "<f4").reshape(d, h, w, c)
    return values, tuple(bbox)


def write_views(path, records):
    Path(path).write_text(json.dumps(records, indent=2))


def read_views(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_ppm(path, image):
    pixels = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


def read_ppm(path):
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0


# --- channel frames -------------------------------------------------------------


def pack_frame(level_index, side_bits, payload):
    level_index = np.asarray(level_index, dtype=np.uint8)
    side_bits = np.asarray(side_bits, dtype=np.uint8)
    iq = np.empty(2 * len(payload), dtype="<f4")
    iq[0::2] = np.real(payload)
    iq[1::2] = np.imag(payload)
    return b"".join(
        [
            FRAME_MAGIC,
            struct.pack("<I", len(level_index)),
            level_index.tobytes(),
            struct.pack("<H", len(side_bits)),
            np.packbits(side_bits).tobytes(),
            iq.tobytes(),
        ]
    )


def unpack_frame(blob):
    reader = _Reader(blob, "frame")
    reader.expect_magic(FRAME_MAGIC)
    (patches,) = reader.take("<I")
    level_index = reader.array(patches, np.uint8)
    (side_len,) = reader.take("<H")
    packed = reader.array((side_len + 7) // 8, np.uint8)
    side_bits = np.unpackbits(packed)[:side_len]
    remaining = len(blob) - reader.offset
    if remaining % 8:
        raise FormatError(f"frame: payload of {remaining} bytes is not whole (I, Q) pairs")
    iq = reader.array(remaining // 4, "<f4")
    payload = (iq[0::2] + 1j * iq[1::2]).astype(np.complex64)
    return level_index, side_bits, payload


# --- logs, tables and manifests -------------------------------------------------------


def write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def content_hash(path):
    """Git blob hash of a file's bytes."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def read_manifest(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
