"""Datasets: CIFAR-10 binary batches, a seeded synthetic image set, splits."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

# Noise level at which nearest-template classification stays exact on the
# default config; template pairs sit >= ~1.4 apart in L2, >> 0.05 noise.
SYNTH_DEFAULT_SIGMA = 0.05


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N x C x H x W, float64 in [0, 1]
    labels: np.ndarray  # N, int64 in [0, K)
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise ValueError("dataset must be non-empty with one label per image")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.provenance)


def read_cifar10_file(path) -> Dataset:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DatasetFormatError(
            f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetFormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, 10, f"cifar10:{Path(path).name}")


def load_cifar10(path, split: str = "train") -> Dataset:
    """Load CIFAR-10 from a directory of binary batches (or a single batch file)."""
    path = Path(path)
    if path.is_file():
        return read_cifar10_file(path)
    names = {"train": CIFAR_TRAIN_FILES, "test": CIFAR_TEST_FILES}[split]
    files = [path / n for n in names if (path / n).exists()]
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 {split} batches under {path}")
    parts = [read_cifar10_file(f) for f in files]
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), 10, f"cifar10:{path}:{split}")


@dataclass(frozen=True)
class SynthConfig:
    """Smooth per-class templates plus i.i.d. Gaussian pixel noise.

    Each template is a mid-grey background with ``blobs`` Gaussian bumps of
    random position, width and per-channel sign; ``contrast`` scales the bumps.
    """

    num_classes: int = 10
    per_class: int = 100
    image_size: int = 16
    channels: int = 3
    blobs: int = 3
    contrast: float = 0.1
    sigma: float = SYNTH_DEFAULT_SIGMA
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.per_class < 1 or self.image_size < 1:
            raise ValueError("SynthConfig needs num_classes >= 2, per_class >= 1, image_size >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def synth_templates(cfg: SynthConfig) -> np.ndarray:
    # templates depend only on the class structure, not on the sample seed
    rng = np.random.default_rng([cfg.num_classes, cfg.image_size, cfg.channels, cfg.blobs])
    S = cfg.image_size
    yy, xx = np.mgrid[0:S, 0:S] / max(S - 1, 1)
    out = np.empty((cfg.num_classes, cfg.channels, S, S))
    for k in range(cfg.num_classes):
        t = np.full((cfg.channels, S, S), 0.5)
        for _ in range(cfg.blobs):
            cy, cx = rng.uniform(0.15, 0.85, 2)
            width = rng.uniform(0.12, 0.3)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            t += cfg.contrast * rng.choice([-1.0, 1.0], cfg.channels)[:, None, None] * bump
        out[k] = t
    return np.clip(out, 0.0, 1.0)


def synth_dataset(cfg: SynthConfig = SynthConfig()) -> Dataset:
    templates = synth_templates(cfg)
    rng = np.random.default_rng(cfg.seed)
    labels = np.repeat(np.arange(cfg.num_classes), cfg.per_class)
    images = templates[labels]
    if cfg.sigma > 0:
        images = images + rng.normal(0.0, cfg.sigma, images.shape)
    order = rng.permutation(len(labels))
    return Dataset(np.clip(images[order], 0.0, 1.0), labels[order].astype(np.int64),
                   cfg.num_classes, f"synth:seed={cfg.seed}")


def split(dataset: Dataset, train_fraction: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded random partition into (train, val); not stratified."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(dataset)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} items at {train_fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]


def nearest_template_predict(images: np.ndarray, templates: Sequence[np.ndarray]) -> np.ndarray:
    t = np.asarray(templates).reshape(len(templates), -1)
    x = images.reshape(len(images), -1)
    d = (x ** 2).sum(1)[:, None] - 2 * x @ t.T + (t ** 2).sum(1)[None, :]
    return np.argmin(d, axis=1)
