"""Datasets: MedMNIST ``.npz`` archives and a seeded synthetic shapes set."""

from __future__ import annotations

import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, InvalidArgument

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# class counts of the benchmark archives, keyed by file stem
MEDMNIST_CLASSES = {
    "pneumoniamnist": 2,
    "bloodmnist": 8,
    "dermamnist": 7,
    "retinamnist": 5,
}

SHAPES = ("disk", "square", "cross", "triangle", "ring", "bar")


@dataclass(frozen=True)
class LabeledImageDataset:
    """Images are N x H x W x C floats in [-1, 1]; labels are ints in [0, K)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidArgument(f"unknown split {self.split!r}")
        if self.images.ndim != 4 or self.images.shape[-1] not in (1, 3):
            raise InvalidArgument(f"images must be N x H x W x C with C in (1, 3), got {self.images.shape}")
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise InvalidArgument("images and labels must be non-empty and equally long")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels outside [0, {self.num_classes}) in split {self.split}")
        if not np.all(np.isfinite(self.images)):
            raise DataError(f"non-finite pixels in split {self.split}")

    def __len__(self):
        return len(self.labels)

    @property
    def image_size(self):
        return self.images.shape[1:3]

    @property
    def channels(self) -> int:
        return self.images.shape[-1]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


def normalize(pixels):
    """uint8 bytes [0, 255] -> float32 [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def denormalize(images):
    """Inverse of :func:`normalize`, rounding to the nearest byte."""
    return np.clip(np.rint((np.asarray(images, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_medmnist(path, num_classes=None, expected_size=None):
    """Read the train/val/test splits of a MedMNIST ``.npz`` archive.

    ``num_classes`` defaults to the known count for the benchmark file names
    and to ``max(label) + 1`` otherwise. Images are never resized; pass
    ``expected_size`` to fail loudly when an archive has the wrong resolution.
    Returns a dict ``{split: LabeledImageDataset}``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        archive = np.load(path, allow_pickle=False)
    except (zipfile.BadZipFile, ValueError, OSError) as err:
        raise FormatError(f"{path} is not a readable npz archive: {err}") from err

    name = path.stem.split("_")[0].lower()
    with archive:
        entries = set(archive.files)
        for split in SPLITS:
            for kind in ("images", "labels"):
                if f"{split}_{kind}" not in entries:
                    raise FormatError(f"{path}: missing entry '{split}_{kind}'")
        raw = {k: archive[k] for k in (f"{s}_{kind}" for s in SPLITS for kind in ("images", "labels"))}

    labels = {s: raw[f"{s}_labels"].reshape(len(raw[f"{s}_labels"]), -1)[:, 0].astype(np.int64) for s in SPLITS}
    if num_classes is None:
        num_classes = MEDMNIST_CLASSES.get(name, int(max(lab.max() for lab in labels.values())) + 1)

    out = {}
    for split in SPLITS:
        imgs = raw[f"{split}_images"]
        if imgs.dtype != np.uint8:
            raise FormatError(f"{path}: '{split}_images' must be uint8, got {imgs.dtype}")
        if imgs.ndim == 3:
            imgs = imgs[..., None]
        if expected_size is not None and tuple(imgs.shape[1:3]) != (expected_size, expected_size):
            raise FormatError(
                f"{path}: '{split}_images' are {imgs.shape[1]}x{imgs.shape[2]}, expected "
                f"{expected_size}x{expected_size}; load the matching-resolution archive instead"
            )
        lab = labels[split]
        bad = (lab < 0) | (lab >= num_classes)
        if bad.any():
            raise DataError(f"{path}: '{split}_labels' has {int(bad.sum())} labels outside [0, {num_classes})")
        out[split] = LabeledImageDataset(normalize(imgs), lab, num_classes, split, name)
        logger.info("%s/%s: %d images, %d classes", name, split, len(lab), num_classes)
    return out


def save_medmnist(path, splits):
    """Write ``{split: (uint8 images, labels)}`` in the MedMNIST archive layout."""
    arrays = {}
    for split, (images, labels) in splits.items():
        arrays[f"{split}_images"] = np.asarray(images, dtype=np.uint8)
        arrays[f"{split}_labels"] = np.asarray(labels).reshape(-1, 1)
    np.savez(path, **arrays)


def _shape_mask(kind, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    # rotated coordinates for the oriented shapes
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    if kind == "disk":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if kind == "triangle":
        # apex up, base at v = 0.6 r
        return (v <= 0.6 * r) & (v >= -r + 1.6 * np.abs(u))
    if kind == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.25 * r)
    raise InvalidArgument(kind)


def make_synthetic(num_classes, per_class, size=28, seed=0, split="train"):
    """Colored shapes on a noisy gray background, one shape per class.

    Position, scale, rotation, shape color and background level are
    jittered per image; class ``c`` always draws ``SHAPES[c]``. Classes are
    balanced and the sample order is a seeded shuffle.
    """
    if not 2 <= num_classes <= len(SHAPES):
        raise InvalidArgument(f"num_classes must be in [2, {len(SHAPES)}], got {num_classes}")
    if size < 16:
        raise InvalidArgument(f"size must be >= 16, got {size}")
    if per_class < 1:
        raise InvalidArgument("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    labels = rng.permutation(np.repeat(np.arange(num_classes), per_class))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i, c in enumerate(labels):
        r = size * rng.uniform(0.22, 0.32)
        margin = r + 1.0
        cy, cx = rng.uniform(margin, size - margin, size=2)
        angle = rng.uniform(-0.35, 0.35)
        bg = rng.uniform(-0.6, -0.1)
        img = bg + 0.08 * rng.standard_normal((size, size, 3))
        color = rng.uniform(0.1, 1.0, size=3)
        color[rng.integers(3)] = 1.0
        mask = _shape_mask(SHAPES[c], yy, xx, cy, cx, r, angle)
        img[mask] = color + 0.05 * rng.standard_normal((int(mask.sum()), 3))
        images[i] = np.clip(img, -1.0, 1.0)
    return LabeledImageDataset(images, labels.astype(np.int64), num_classes, split, f"synthetic{num_classes}")


def to_nchw(images):
    return np.ascontiguousarray(np.transpose(images, (0, 3, 1, 2)))


def to_nhwc(images):
    return np.ascontiguousarray(np.transpose(images, (0, 2, 3, 1)))
