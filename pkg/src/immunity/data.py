"""Dataset ingestion, synthesis, augmentation, and normalization.

Supports the CIFAR binary record layout at format level (tests run against
a committed fixture, never a download), a deterministic synthetic shape
dataset for desk-scale experiments, and the IMDS on-disk container.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

DATASET_MAGIC = b"IMDS"
DATASET_VERSION = 1

_CIFAR_PIXELS = 3072
_SHAPE_NAMES = ("filled_square", "hollow_square", "cross", "diagonal_stripe",
                "disc", "triangle", "horizontal_bars", "checker")


@dataclass
class DatasetMeta:
    n_classes: int
    channel_means: np.ndarray
    channel_stds: np.ndarray
    n_samples: int
    provenance: str  # cifar10 | cifar100 | synthetic

    def __post_init__(self):
        self.channel_means = np.asarray(self.channel_means, dtype=np.float64)
        self.channel_stds = np.asarray(self.channel_stds, dtype=np.float64)
        if np.any(self.channel_stds <= 0):
            raise ValueError("channel stds must be positive")


@dataclass
class Dataset:
    """Immutable image batch: (n, C, H, W) pixels in [0, 1] plus labels."""

    images: np.ndarray
    labels: np.ndarray
    meta: DatasetMeta

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValueError(f"bad dataset arrays: images {self.images.shape}, "
                             f"labels {self.labels.shape}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def input_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        meta = DatasetMeta(self.meta.n_classes, self.meta.channel_means,
                           self.meta.channel_stds, len(idx), self.meta.provenance)
        return Dataset(self.images[idx], self.labels[idx], meta)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield (images, labels) batches; shuffles when given an rng."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


def _meta_from_images(images: np.ndarray, n_classes: int, provenance: str) -> DatasetMeta:
    means = images.mean(axis=(0, 2, 3))
    stds = images.std(axis=(0, 2, 3))
    stds = np.where(stds <= 0, 1.0, stds)
    return DatasetMeta(n_classes, means, stds, len(images), provenance)


# ---------------------------------------------------------------------------
# CIFAR binary layout
# ---------------------------------------------------------------------------

def load_cifar_binary(path: str, variant: str) -> Dataset:
    """Read a CIFAR binary batch file.

    cifar10 records are 1 label byte + 3072 pixel bytes; cifar100 records
    carry coarse and fine label bytes (the fine one is used). Pixels are the
    red, green, then blue plane, row-major, scaled to [0, 1] by 255.
    """
    if variant not in ("cifar10", "cifar100"):
        raise ValueError(f"unknown variant {variant!r}, expected cifar10 or cifar100")
    label_bytes = 1 if variant == "cifar10" else 2
    n_classes = 10 if variant == "cifar10" else 100
    record = label_bytes + _CIFAR_PIXELS
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % record != 0:
        raise ValueError(f"{path}: size {raw.size} is not a positive multiple of "
                         f"the {record}-byte {variant} record")
    rows = raw.reshape(-1, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise ValueError(f"{path}: record {bad[0]} has label {labels[bad[0]]} "
                         f">= {n_classes} classes")
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    if variant == "cifar100":
        coarse = rows[:, 0]
        if np.any(coarse >= 20):
            bad = int(np.flatnonzero(coarse >= 20)[0])
            raise ValueError(f"{path}: record {bad} has coarse label {coarse[bad]} >= 20")
    return Dataset(images, labels, _meta_from_images(images, n_classes, variant))


def save_cifar_binary(dataset: Dataset, path: str, variant: str,
                      coarse_labels: np.ndarray | None = None) -> None:
    """Write a dataset back to the CIFAR record layout (inverse of the
    loader; pixel floats are rounded back to bytes)."""
    if dataset.input_shape != (3, 32, 32):
        raise ValueError(f"CIFAR layout needs (3, 32, 32) images, got {dataset.input_shape}")
    label_bytes = 1 if variant == "cifar10" else 2
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    out = np.empty((len(dataset), label_bytes + _CIFAR_PIXELS), dtype=np.uint8)
    if variant == "cifar10":
        out[:, 0] = dataset.labels
    else:
        out[:, 0] = np.zeros(len(dataset)) if coarse_labels is None else coarse_labels
        out[:, 1] = dataset.labels
    out[:, label_bytes:] = pixels
    out.tofile(path)


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def _draw_template(name: str, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if name == "filled_square":
        return ((np.abs(dy) <= radius) & (np.abs(dx) <= radius)).astype(np.float64)
    if name == "hollow_square":
        outer = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
        inner = (np.abs(dy) <= radius - 2) & (np.abs(dx) <= radius - 2)
        return (outer & ~inner).astype(np.float64)
    if name == "cross":
        bar = max(1.0, radius / 2.5)
        return (((np.abs(dy) <= bar) & (np.abs(dx) <= radius)) |
                ((np.abs(dx) <= bar) & (np.abs(dy) <= radius))).astype(np.float64)
    if name == "diagonal_stripe":
        return ((np.abs(dy - dx) <= max(1.5, radius / 2)) &
                (np.abs(dy) <= radius) & (np.abs(dx) <= radius)).astype(np.float64)
    if name == "disc":
        return (dy * dy + dx * dx <= radius * radius).astype(np.float64)
    if name == "triangle":
        return ((dy >= -radius) & (dy <= radius) &
                (np.abs(dx) <= (dy + radius) / 2)).astype(np.float64)
    if name == "horizontal_bars":
        period = max(2.0, radius / 1.5)
        return ((np.abs(dy) <= radius) & (np.abs(dx) <= radius) &
                (np.floor(dy / period) % 2 == 0)).astype(np.float64)
    if name == "checker":
        cell = max(2.0, radius / 2)
        return ((np.abs(dy) <= radius) & (np.abs(dx) <= radius) &
                ((np.floor(dy / cell) + np.floor(dx / cell)) % 2 == 0)).astype(np.float64)
    raise ValueError(f"unknown template {name!r}")


def synth_shapes(n: int, classes: int, size: int, seed: int) -> Dataset:
    """Balanced synthetic dataset of geometric shapes.

    Each class is one template drawn at a random position and scale with a
    weakly class-correlated color (heavy jitter keeps raw color from being
    linearly sufficient) over a noisy mid-gray background. Contrast is kept
    moderate so pixel-budget attacks are meaningful rather than saturated.
    """
    if not 2 <= classes <= len(_SHAPE_NAMES):
        raise ValueError(f"classes must be in 2..{len(_SHAPE_NAMES)}, got {classes}")
    if size < 12:
        raise ValueError(f"size must be >= 12, got {size}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    images = np.empty((n, 3, size, size))
    base_hues = np.stack([0.5 + 0.35 * np.cos(2 * np.pi * (np.arange(classes) / classes + off))
                          for off in (0.0, 1 / 3, 2 / 3)], axis=1)
    for q in range(n):
        c = labels[q]
        radius = rng.uniform(0.18, 0.32) * size
        cx = rng.uniform(radius, size - 1 - radius)
        cy = rng.uniform(radius, size - 1 - radius)
        mask = _draw_template(_SHAPE_NAMES[c], size, cx, cy, radius)
        color = 0.5 * np.clip(0.45 * base_hues[c] + 0.55 * rng.uniform(0.25, 1.0, 3), 0.15, 1.0)
        img = np.full((3, size, size), 0.30)
        img += mask[None] * color[:, None, None]
        img += rng.uniform(0.0, 0.1, (3, size, size))
        images[q] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(n)
    images, labels = images[order], labels[order]
    return Dataset(images, labels, _meta_from_images(images, classes, "synthetic"))


# ---------------------------------------------------------------------------
# augmentation and normalization
# ---------------------------------------------------------------------------

def _rotate_bilinear(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate channel-major image around its center; samples outside the
    frame clamp to the nearest edge pixel."""
    if degrees == 0.0:
        return image
    c, h, w = image.shape
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    src_y = np.clip(cos_t * dy - sin_t * dx + cy, 0, h - 1)
    src_x = np.clip(sin_t * dy + cos_t * dx + cx, 0, w - 1)
    y0 = np.minimum(src_y.astype(np.intp), h - 2 if h > 1 else 0)
    x0 = np.minimum(src_x.astype(np.intp), w - 2 if w > 1 else 0)
    fy, fx = src_y - y0, src_x - x0
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    out = np.empty_like(image)
    for ch in range(c):
        plane = image[ch]
        top = plane[y0, x0] + fx * (plane[y0, x1] - plane[y0, x0])
        bot = plane[y1, x0] + fx * (plane[y1, x1] - plane[y1, x0])
        out[ch] = top + fy * (bot - top)
    return out


def augment(image: np.ndarray, label: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Random shifted crop (2px reflect pad) then a rotation in +-15 degrees.

    The label passes through untouched; output stays in [0, 1].
    """
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (2, 2), (2, 2)), mode="reflect")
    oy, ox = rng.integers(0, 5, size=2)
    cropped = padded[:, oy:oy + h, ox:ox + w]
    angle = rng.uniform(-15.0, 15.0)
    return np.clip(_rotate_bilinear(cropped, angle), 0.0, 1.0), label


def normalize(batch: np.ndarray, meta: DatasetMeta) -> np.ndarray:
    """Per-channel (x - mean) / std."""
    c = batch.shape[1]
    return (batch - meta.channel_means.reshape(1, c, 1, 1)) / meta.channel_stds.reshape(1, c, 1, 1)


def denormalize(batch: np.ndarray, meta: DatasetMeta) -> np.ndarray:
    c = batch.shape[1]
    return batch * meta.channel_stds.reshape(1, c, 1, 1) + meta.channel_means.reshape(1, c, 1, 1)


# ---------------------------------------------------------------------------
# IMDS container
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path: str) -> None:
    """Write the IMDS container: magic, version, meta block, then one record
    per sample (int32 label + float64 pixels, little-endian)."""
    m = dataset.meta
    tag = m.provenance.encode("ascii")
    n, c, h, w = (len(dataset),) + dataset.input_shape
    out = bytearray()
    out += DATASET_MAGIC
    out.append(DATASET_VERSION)
    out += struct.pack("<5I", n, m.n_classes, c, h, w)
    out += struct.pack("<H", len(tag)) + tag
    out += m.channel_means.astype("<f8").tobytes()
    out += m.channel_stds.astype("<f8").tobytes()
    for q in range(n):
        out += struct.pack("<i", int(dataset.labels[q]))
        out += dataset.images[q].astype("<f8").tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(bytes(out))
    os.replace(tmp, path)


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DATASET_MAGIC:
        raise ValueError(f"bad magic {data[:4]!r}, expected {DATASET_MAGIC!r}")
    if len(data) < 5 or data[4] != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {data[4] if len(data) > 4 else None}")
    pos = 5
    n, n_classes, c, h, w = struct.unpack_from("<5I", data, pos)
    pos += 20
    (tag_len,) = struct.unpack_from("<H", data, pos)
    pos += 2
    tag = data[pos:pos + tag_len].decode("ascii")
    pos += tag_len
    means = np.frombuffer(data, dtype="<f8", count=c, offset=pos).astype(np.float64)
    pos += 8 * c
    stds = np.frombuffer(data, dtype="<f8", count=c, offset=pos).astype(np.float64)
    pos += 8 * c
    record = 4 + 8 * c * h * w
    expected = pos + n * record
    if len(data) != expected:
        raise ValueError(f"dataset stream length {len(data)} does not match "
                         f"expected {expected} ({n} records of {record} bytes after byte {pos})")
    images = np.empty((n, c, h, w))
    labels = np.empty(n, dtype=np.int64)
    for q in range(n):
        (labels[q],) = struct.unpack_from("<i", data, pos)
        pos += 4
        images[q] = np.frombuffer(data, dtype="<f8", count=c * h * w,
                                  offset=pos).reshape(c, h, w)
        pos += 8 * c * h * w
    meta = DatasetMeta(n_classes, means, stds, n, tag)
    return Dataset(images, labels, meta)
