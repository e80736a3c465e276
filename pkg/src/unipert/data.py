"""MNIST (IDX) and CIFAR-10 (binary v1) loaders plus seeded minibatch streams."""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3072


class DataError(Exception):
    """Base class for dataset ingestion failures."""


class MagicMismatchError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class RecordSizeError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    name: str = "dataset"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def take(self, idx, name=None):
        return Dataset(self.images[idx], self.labels[idx], self.split, name or self.name, self.num_classes)


def _read(path):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _idx_header(buf, expected_magic, ndim, path):
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: header truncated")
    magic = int.from_bytes(buf[:4], "big")
    if magic != expected_magic:
        raise MagicMismatchError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(buf) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = [int.from_bytes(buf[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    need = 4 + 4 * ndim + int(np.prod(dims))
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes, header promises {need}")
    return dims, 4 + 4 * ndim


def load_mnist(images_path, labels_path, split="train", name="mnist") -> Dataset:
    ibuf, lbuf = _read(images_path), _read(labels_path)
    (n, h, w), off = _idx_header(ibuf, IDX_IMAGES_MAGIC, 3, images_path)
    (m,), loff = _idx_header(lbuf, IDX_LABELS_MAGIC, 1, labels_path)
    if n != m:
        raise CountMismatchError(f"{n} images but {m} labels")
    pixels = np.frombuffer(ibuf, np.uint8, count=n * h * w, offset=off)
    images = (pixels.astype(np.float32) / 255.0).reshape(n, 1, h, w)
    labels = np.frombuffer(lbuf, np.uint8, count=m, offset=loff).astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise DataError(f"{labels_path}: label {labels.max()} out of range")
    return Dataset(images, labels, split, name)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "val": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist_dir(root, split="train") -> Dataset:
    img, lab = MNIST_FILES[split]
    root = Path(root)
    return load_mnist(root / img, root / lab, split=split)


CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "val": ["test_batch.bin"],
}


def load_cifar10(root, split="train") -> Dataset:
    parts = []
    for fname in CIFAR_FILES[split]:
        buf = _read(Path(root) / fname)
        if len(buf) % CIFAR_RECORD:
            raise RecordSizeError(
                f"{fname}: {len(buf)} bytes is not a multiple of the {CIFAR_RECORD}-byte record"
            )
        parts.append(np.frombuffer(buf, np.uint8).reshape(-1, CIFAR_RECORD))
    raw = np.concatenate(parts)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise DataError(f"label byte {labels.max()} out of range")
    images = (raw[:, 1:].astype(np.float32) / 255.0).reshape(-1, 3, 32, 32)
    return Dataset(images, labels, split, "cifar10")


def default_data_dir():
    return os.environ.get("UNIP_DATA_DIR", "data")


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Uniform random sample of ``n`` examples without replacement."""
    if n > len(ds):
        raise ValueError(f"subset size {n} exceeds dataset size {len(ds)}")
    idx = subset_indices(len(ds), n, seed)
    return ds.take(idx, f"{ds.name}[{n}@{seed}]")


def subset_indices(N, n, seed):
    return np.random.default_rng(seed).permutation(N)[:n]


@dataclass
class BatchPlan:
    batch_size: int
    seed: int = 0
    shuffle: bool = True
    epochs: int = 1


def epoch_order(N, seed, epoch, shuffle=True):
    if not shuffle:
        return np.arange(N)
    return np.random.default_rng(seed + epoch).permutation(N)


def batches(ds: Dataset, plan: BatchPlan):
    """Yield (x, labels) minibatches; the short final batch of each epoch is kept."""
    N = len(ds)
    for epoch in range(plan.epochs):
        order = epoch_order(N, plan.seed, epoch, plan.shuffle)
        for i in range(0, N, plan.batch_size):
            idx = order[i : i + plan.batch_size]
            yield ds.images[idx], ds.labels[idx]


def step_batches(ds: Dataset, batch_size: int, seed: int, total_steps: int):
    """Exactly ``total_steps`` minibatches, cycling through reshuffled epochs."""
    stream = batches(ds, BatchPlan(batch_size, seed, True, epochs=10**9))
    for _ in range(total_steps):
        yield next(stream)
