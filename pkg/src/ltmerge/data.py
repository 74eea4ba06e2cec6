"""Datasets: synthetic per-class blob images and IDX file I/O."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(Exception):
    pass


class BadMagicError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W) float in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1).astype(np.float64)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def class_templates(image_size: int, classes: int) -> np.ndarray:
    """One Gaussian blob per class, centres spaced evenly on a circle."""
    if classes < 2:
        raise DataError("need at least two classes")
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    c = (image_size - 1) / 2.0
    radius = image_size / 4.0
    width = image_size / 8.0
    out = np.empty((classes, image_size, image_size))
    for k in range(classes):
        angle = 2 * math.pi * k / classes + math.pi / 4
        cy, cx = c + radius * math.sin(angle), c + radius * math.cos(angle)
        out[k] = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    return out


def synthetic_blobs(image_size: int = 16, classes: int = 3, per_class: int = 100,
                    noise: float = 0.1, seed: int = 0, stream: int = 0) -> Dataset:
    """Class template plus Gaussian noise, clipped and quantised to 8 bits.

    Samples are interleaved by class so any prefix is roughly balanced.
    """
    rng = np.random.default_rng([seed, stream])
    templates = class_templates(image_size, classes)
    labels = np.tile(np.arange(classes), per_class)
    imgs = templates[labels] + noise * rng.standard_normal((len(labels), image_size, image_size))
    q = np.clip(np.round(np.clip(imgs, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return Dataset(q.astype(np.float64) / 255.0, labels.astype(np.int64))


def nearest_template_accuracy(ds: Dataset, image_size: int, classes: int) -> float:
    t = class_templates(image_size, classes).reshape(classes, -1)
    d = ((ds.flat()[:, None, :] - t[None]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == ds.labels).mean())


# ------------------------------------------------------------------- IDX


def write_idx(ds: Dataset, image_path, label_path):
    q = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8)
    n, h, w = q.shape
    with open(image_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        f.write(q.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def read_idx_images(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise BadMagicError(f"{path}: image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")
    need = 16 + n * h * w
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, header promises {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=16).reshape(n, h, w)


def read_idx_labels(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise BadMagicError(f"{path}: label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")
    if len(raw) < 8 + n:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, header promises {8 + n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8)


def load_idx(image_path, label_path) -> Dataset:
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def idx_paths(directory, prefix: str) -> tuple[str, str]:
    return (os.path.join(directory, f"{prefix}-images-idx3-ubyte"),
            os.path.join(directory, f"{prefix}-labels-idx1-ubyte"))


def gen_data(out_dir, image_size=16, classes=3, train_per_class=100, test_per_class=50,
             noise=0.1, seed=0) -> dict:
    """Write train and test splits as IDX files; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for stream, (prefix, per_class) in enumerate((("train", train_per_class), ("test", test_per_class))):
        ds = synthetic_blobs(image_size, classes, per_class, noise, seed, stream)
        img, lab = idx_paths(out_dir, prefix)
        write_idx(ds, img, lab)
        paths[prefix] = (img, lab)
    return paths
