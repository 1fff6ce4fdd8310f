"""Dataset containers, IDX parsing and the synthetic blob generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y).astype(np.intp)
        if len(self.X) != len(self.y):
            raise ValueError(f"{len(self.X)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self):
        return self.X.shape[1:]

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], self.n_classes)


def _read_header(data, path, magic, ndim):
    if len(data) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header")
    found = struct.unpack_from(">i", data)[0]
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic number {found} (expected {magic})")
    return struct.unpack_from(f">{ndim}i", data, 4)


def read_idx_images(path):
    """Raw ``uint8`` array of shape ``(n, rows, cols)``."""
    data = Path(path).read_bytes()
    n, rows, cols = _read_header(data, path, IDX_IMAGES_MAGIC, 3)
    payload = data[16:]
    if len(payload) != n * rows * cols:
        raise IdxFormatError(f"{path}: payload has {len(payload)} bytes, header implies {n * rows * cols}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path):
    data = Path(path).read_bytes()
    (n,) = _read_header(data, path, IDX_LABELS_MAGIC, 1)
    payload = data[8:]
    if len(payload) != n:
        raise IdxFormatError(f"{path}: payload has {len(payload)} bytes, header implies {n}")
    return np.frombuffer(payload, dtype=np.uint8).copy()


def load_idx(images_path, labels_path, n_classes=10):
    """Load an IDX image/label pair as a ``(n, 1, rows, cols)`` dataset scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels, n_classes)


def write_idx(images_path, labels_path, images, labels):
    """Write ``uint8`` images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4i", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2i", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def downsample(ds, factor=2):
    """Average-pool images by ``factor`` (28x28 -> 14x14 for factor 2)."""
    X = ds.X
    n, c, h, w = X.shape
    h2, w2 = h // factor, w // factor
    X = X[:, :, : h2 * factor, : w2 * factor].reshape(n, c, h2, factor, w2, factor).mean(axis=(3, 5))
    return Dataset(X, ds.y, ds.n_classes)


def stratified_subset(ds, n, seed=0):
    """Draw ``n`` samples with classes as balanced as possible (deterministic)."""
    rng = np.random.default_rng(seed)
    per_class = [rng.permutation(np.flatnonzero(ds.y == k)) for k in range(ds.n_classes)]
    picked = []
    i = 0
    while len(picked) < min(n, len(ds)):
        bucket = per_class[i % ds.n_classes]
        j = i // ds.n_classes
        if j < len(bucket):
            picked.append(bucket[j])
        i += 1
    return ds.subset(np.sort(np.array(picked, dtype=np.intp)))


@dataclass
class SyntheticSpec:
    n_classes: int = 4
    samples_per_class: int = 250
    dim: int = 32
    separation: float = 1.0
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.n_classes < 2 or self.samples_per_class < 1 or self.dim < 1:
            raise ValueError("need at least 2 classes, 1 sample per class and 1 dimension")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def synthetic_centers(spec):
    """Class centres: random directions scaled so the closest pair is ``separation`` apart."""
    rng = np.random.default_rng(spec.seed)
    raw = rng.normal(size=(spec.n_classes, spec.dim))
    raw -= raw.mean(axis=0)
    gaps = np.linalg.norm(raw[:, None] - raw[None], axis=-1)
    closest = gaps[np.triu_indices(spec.n_classes, 1)].min()
    centers = 0.5 + raw * (spec.separation / closest)
    return np.clip(centers, 0.1, 0.9)


def make_synthetic(spec):
    """Gaussian blobs in ``[0, 1]^dim``; returns ``(train, test)`` split 80/20 per class."""
    centers = synthetic_centers(spec)
    rng = np.random.default_rng([spec.seed, 1])
    X = centers[:, None, :] + spec.noise * rng.normal(size=(spec.n_classes, spec.samples_per_class, spec.dim))
    X = np.clip(X, 0.0, 1.0)
    n_train = int(round(0.8 * spec.samples_per_class))
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class).reshape(spec.n_classes, -1)
    train = Dataset(X[:, :n_train].reshape(-1, spec.dim), labels[:, :n_train].ravel(), spec.n_classes)
    test = Dataset(X[:, n_train:].reshape(-1, spec.dim), labels[:, n_train:].ravel(), spec.n_classes)
    return train, test
