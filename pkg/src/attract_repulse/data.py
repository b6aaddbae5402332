"""Datasets: CIFAR-10 binary files, synthetic class-textured images, per-class subsampling."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .augment import AugPolicy
from .exceptions import FormatError, InvalidInputError

CIFAR10_RECORD = 3073
CIFAR10_SIDE = 32
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    """Images stored as ``uint8`` ``(n, H, W, 3)`` with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] == 0:
            raise InvalidInputError("dataset is empty")
        if self.images.shape[0] != self.labels.shape[0]:
            raise InvalidInputError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx],
                       split=split or self.split)

    def to_float(self, policy: AugPolicy | None = None) -> np.ndarray:
        """Channels-first float32, scaled to [0, 1] and standardized with ``policy``."""
        x = self.images.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
        return x if policy is None else policy.normalize(x)


def _decode_cifar10(raw: bytes, source: str) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) == 0 or len(raw) % CIFAR10_RECORD:
        raise FormatError(
            f"{source}: size {len(raw)} is not a positive multiple of {CIFAR10_RECORD}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{source}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    images = rec[:, 1:].reshape(-1, 3, CIFAR10_SIDE, CIFAR10_SIDE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def load_cifar10_binary(path, split: str = "train") -> Dataset:
    """Read CIFAR-10 binary records (1 label byte + 1024 R + 1024 G + 1024 B bytes).

    ``path`` may be a single ``.bin`` file or the extracted
    ``cifar-10-batches-bin`` directory, in which case ``split`` picks the five
    training batches or the test batch.
    """
    path = Path(path)
    if path.is_dir():
        names = CIFAR10_TRAIN_FILES if split == "train" else (CIFAR10_TEST_FILE,)
        files = [path / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR-10 files: {missing}")
    else:
        files = [path]
    parts = [_decode_cifar10(f.read_bytes(), str(f)) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, 10, split)


def find_cifar10(path=None) -> Path | None:
    """Locate an extracted ``cifar-10-batches-bin`` directory, or return None."""
    candidates = [path, os.environ.get("ATTRACT_REPULSE_CIFAR10"),
                  Path.home() / "data" / "cifar-10-batches-bin", Path("data/cifar-10-batches-bin")]
    for c in candidates:
        if c and (Path(c) / CIFAR10_TEST_FILE).exists():
            return Path(c)
    return None


def make_synthetic_blobs(num_classes: int, n_per_class: int, image_size: int = 32,
                         seed: int = 0, snr: float = 3.0, split: str = "train",
                         channels: int = 3) -> Dataset:
    """Class-conditional Gaussian-textured images.

    Every class owns a smooth random texture (drawn from ``seed`` alone, so
    train and test splits of one seed share textures).  A sample is that
    texture scaled by ``snr`` plus unit white noise, mapped to ``uint8``.
    """
    if num_classes < 2:
        raise InvalidInputError("num_classes must be >= 2")
    if n_per_class < 1 or image_size < 2:
        raise InvalidInputError("n_per_class and image_size must be positive")
    trng = np.random.default_rng([int(seed), 7])
    coarse = max(image_size // 4, 1)
    reps = -(-image_size // coarse)
    tex = trng.standard_normal((num_classes, coarse, coarse, channels))
    tex = np.repeat(np.repeat(tex, reps, axis=1), reps, axis=2)[:, :image_size, :image_size]
    tex /= tex.reshape(num_classes, -1).std(axis=1)[:, None, None, None]

    srng = np.random.default_rng([int(seed), 11, 0 if split == "train" else 1])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    noise = srng.standard_normal((labels.size, image_size, image_size, channels))
    x = snr * tex[labels] + noise
    images = np.clip(128 + 24 * x, 0, 255).astype(np.uint8)
    order = srng.permutation(labels.size)
    return Dataset(images[order], labels[order], num_classes, split)


def subsample_per_class(ds: Dataset, n_per_class: int, seed: int) -> Dataset:
    """Keep exactly ``n_per_class`` items of every class, chosen by a seeded shuffle."""
    counts = ds.class_counts
    short = np.flatnonzero(counts < n_per_class)
    if short.size:
        raise InvalidInputError(
            f"classes {short.tolist()} have fewer than {n_per_class} members"
        )
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        keep.append(rng.permutation(members)[:n_per_class])
    return ds.subset(np.sort(np.concatenate(keep)))


def train_val_split(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified random hold-out of ``val_fraction`` of each class."""
    if not 0 < val_fraction < 1:
        raise InvalidInputError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    val = []
    for c in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == c))
        k = int(round(val_fraction * members.size))
        val.append(members[:k])
    val_idx = np.sort(np.concatenate(val))
    train_idx = np.setdiff1d(np.arange(len(ds)), val_idx)
    if val_idx.size == 0 or train_idx.size == 0:
        raise InvalidInputError("split leaves an empty side")
    return ds.subset(train_idx, "train"), ds.subset(val_idx, "val")
