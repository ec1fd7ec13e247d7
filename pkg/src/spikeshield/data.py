"""Labelled image sets: IDX files, a raw u8 tensor format, and synthetic shapes.

Every loader returns float32 images in [0, 1] shaped [N, C, H, W] plus int64
labels.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, DomainError, IntegrityError, ParseError

FORMATS = ("idx", "raw-u8-tensor", "builtin-synthetic")
RAW_MAGIC = b"RU8T"
SYNTHETIC_CLASSES = 10


class LabeledImages(NamedTuple):
    images: np.ndarray  # float32 [N, C, H, W] in [0, 1]
    labels: np.ndarray  # int64 [N]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "LabeledImages":
        return LabeledImages(self.images[index], self.labels[index])

    def split(self, n_first: int) -> tuple["LabeledImages", "LabeledImages"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


def _validate(images: np.ndarray, labels: np.ndarray) -> LabeledImages:
    if len(images) != len(labels):
        raise IntegrityError(f"{len(images)} images but {len(labels)} labels")
    if images.size and (images.min() < 0 or images.max() > 1 or not np.isfinite(images).all()):
        raise DomainError("images must lie in [0, 1] after normalisation")
    return LabeledImages(images.astype(np.float32, copy=False), labels.astype(np.int64))


# -- IDX -------------------------------------------------------------------------------

def _read_idx(path: Path, expect_dims: tuple[int, ...]) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 4:
        raise ParseError(f"{path.name}: truncated IDX magic", len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08 or ndim not in expect_dims:
        raise ParseError(f"{path.name}: bad IDX magic 0x{raw[:4].hex()} "
                         f"(expected unsigned-byte data with {expect_dims} dims)", 0)
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ParseError(f"{path.name}: truncated IDX header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = int(np.prod(dims))
    if len(raw) - head < need:
        raise ParseError(f"{path.name}: payload holds {len(raw) - head} bytes, header promises "
                         f"{need}", len(raw))
    if len(raw) - head > need:
        raise ParseError(f"{path.name}: {len(raw) - head - need} trailing bytes", head + need)
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=head).reshape(dims)


def _labels_path_for(path: Path) -> Path:
    name = path.name
    for a, b in (("images", "labels"), ("idx3", "idx1"), ("idx4", "idx1")):
        name = name.replace(a, b)
    if name == path.name:
        raise ConfigurationError(f"cannot infer a labels file for {path}; pass labels_path")
    return path.with_name(name)


def load_idx(path, labels_path=None) -> LabeledImages:
    """IDX unsigned-byte images (3-d N,H,W or 4-d N,C,H,W) plus a 1-d label file."""
    path = Path(path)
    images = _read_idx(path, (3, 4))
    labels = _read_idx(Path(labels_path) if labels_path else _labels_path_for(path), (1,))
    if images.ndim == 3:
        images = images[:, None]
    return _validate(images.astype(np.float32) / 255.0, labels)


def write_idx(path, images_u8: np.ndarray) -> None:
    a = np.ascontiguousarray(images_u8, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">HBB", 0, 0x08, a.ndim)
                           + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes())


# -- raw u8 tensor ---------------------------------------------------------------------

def load_raw_u8(path) -> LabeledImages:
    """``RU8T`` magic, u32 rank (=4), u32 N,C,H,W, N*C*H*W pixel bytes, N label bytes."""
    raw = Path(path).read_bytes()
    if raw[:4] != RAW_MAGIC:
        raise ParseError(f"bad raw tensor magic {raw[:4]!r}", 0)
    if len(raw) < 8:
        raise ParseError("truncated rank field", len(raw))
    (rank,) = struct.unpack("<I", raw[4:8])
    if rank != 4:
        raise ParseError(f"raw tensor rank must be 4, got {rank}", 4)
    if len(raw) < 24:
        raise ParseError("truncated extents", len(raw))
    dims = struct.unpack("<4I", raw[8:24])
    n_pix = int(np.prod(dims))
    end = 24 + n_pix
    if len(raw) < end:
        raise ParseError(f"pixel payload truncated: need {n_pix} bytes", len(raw))
    if len(raw) != end + dims[0]:
        raise IntegrityError(f"{dims[0]} images but {len(raw) - end} label bytes")
    images = np.frombuffer(raw, np.uint8, n_pix, 24).reshape(dims)
    labels = np.frombuffer(raw, np.uint8, dims[0], end)
    return _validate(images.astype(np.float32) / 255.0, labels)


def write_raw_u8(path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    a = np.ascontiguousarray(images_u8, dtype=np.uint8)
    if a.ndim != 4:
        raise ConfigurationError("raw u8 tensors are [N, C, H, W]")
    Path(path).write_bytes(RAW_MAGIC + struct.pack("<5I", 4, *a.shape) + a.tobytes()
                           + np.asarray(labels, dtype=np.uint8).tobytes())


# -- synthetic shapes ------------------------------------------------------------------

def _shape_field(kind: int, yy: np.ndarray, xx: np.ndarray, r: float, angle: float) -> np.ndarray:
    """Signed distance-like field for one of ten shapes; negative inside."""
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * xx + s * yy, -s * xx + c * yy
    rad = np.hypot(xx, yy)
    bar = 0.3 * r
    if kind == 0:  # disk
        return rad - r
    if kind == 1:  # square
        return np.maximum(np.abs(u), np.abs(v)) - 0.85 * r
    if kind == 2:  # ring
        return np.abs(rad - 0.8 * r) - bar
    if kind == 3:  # horizontal bar
        return np.maximum(np.abs(v) - bar, np.abs(u) - 1.2 * r)
    if kind == 4:  # vertical bar
        return np.maximum(np.abs(u) - bar, np.abs(v) - 1.2 * r)
    if kind == 5:  # plus
        return np.minimum(np.maximum(np.abs(v) - bar, np.abs(u) - r),
                          np.maximum(np.abs(u) - bar, np.abs(v) - r))
    if kind == 6:  # diagonal cross
        d1, d2 = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
        return np.minimum(np.maximum(np.abs(d1) - bar, np.abs(d2) - r),
                          np.maximum(np.abs(d2) - bar, np.abs(d1) - r))
    if kind == 7:  # triangle
        return np.maximum.reduce([v - 0.6 * r,
                                  -0.5 * v + 0.866 * u - 0.6 * r,
                                  -0.5 * v - 0.866 * u - 0.6 * r])
    if kind == 8:  # hollow square
        return np.abs(np.maximum(np.abs(u), np.abs(v)) - 0.75 * r) - bar
    # two blobs
    return np.minimum(np.hypot(u - 0.6 * r, v), np.hypot(u + 0.6 * r, v)) - 0.45 * r


def synthetic_shapes(count: int, seed: int = 0, size: int = 16) -> LabeledImages:
    """Soft-edged low-contrast shapes on a mid-grey gradient, ten balanced classes.

    Intensities stay well inside (0, 1) so additive perturbations are rarely
    clipped.
    """
    if count < 0 or size < 8:
        raise ConfigurationError(f"need count >= 0 and size >= 8 (got {count}, {size})")
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % SYNTHETIC_CLASSES
    rng.shuffle(labels)
    grid = np.arange(size, dtype=np.float64) - (size - 1) / 2
    images = np.empty((count, 1, size, size), dtype=np.float32)
    for i, kind in enumerate(labels):
        cy, cx = rng.uniform(-size / 8, size / 8, size=2)
        r = rng.uniform(0.22, 0.32) * size
        angle = rng.uniform(-0.3, 0.3)
        yy, xx = np.meshgrid(grid - cy, grid - cx, indexing="ij")
        field = _shape_field(int(kind), yy, xx, r, angle)
        mask = 1.0 / (1.0 + np.exp(field / 0.6))  # soft edge about one pixel wide
        base = rng.uniform(0.35, 0.6)
        tilt = rng.uniform(-0.08, 0.08, size=2) / size
        background = base + tilt[0] * (yy + cy) + tilt[1] * (xx + cx)
        contrast = rng.uniform(0.15, 0.3) * rng.choice([-1.0, 1.0])
        images[i, 0] = np.clip(background + contrast * mask, 0.0, 1.0)
    return _validate(images, labels)


def load_dataset(path, format: str, labels_path=None, count: int = 2500,
                 seed: int = 0) -> LabeledImages:
    """Load a labelled image set; ``path`` is ignored for ``builtin-synthetic``."""
    if format == "idx":
        return load_idx(path, labels_path)
    if format == "raw-u8-tensor":
        return load_raw_u8(path)
    if format == "builtin-synthetic":
        return synthetic_shapes(count, seed)
    raise ConfigurationError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
