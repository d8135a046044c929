"""Datasets, labeled-subset selection, batching and noise.

Labels are 0-based class indices throughout.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .nn import DTYPE

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_VALIDATION = 5000
DATA_ROOT_ENV = "IPMSSL_DATA_ROOT"


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    n_classes: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("samples and labels differ in length")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("labels out of range")
        splits = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if splits[0] & splits[1] or splits[0] & splits[2] or splits[1] & splits[2]:
            raise ValueError("train/val/test splits overlap")

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])


@dataclass(frozen=True)
class LabeledSplit:
    labeled: np.ndarray
    unlabeled: np.ndarray


def synthetic_mixture(n_classes: int, n_per_class: int, input_dim: int, seed: int,
                      radius: float = 4.0, std: float = 0.5) -> Dataset:
    """K Gaussian blobs with means evenly spaced on a circle in the first two dims.

    Remaining dims are N(0, 0.5^2) noise.  Each class is split 70/15/15 into
    train/val/test.
    """
    if n_classes < 2 or input_dim < 2:
        raise ValueError("synthetic mixture needs n_classes >= 2 and input_dim >= 2")
    rng = np.random.default_rng(seed)
    means = mixture_means(n_classes, radius)
    y = np.repeat(np.arange(n_classes), n_per_class)
    x = np.empty((len(y), input_dim))
    x[:, :2] = means[y] + std * rng.standard_normal((len(y), 2))
    x[:, 2:] = 0.5 * rng.standard_normal((len(y), input_dim - 2))
    parts = {"train": [], "val": [], "test": []}
    n_train, n_val = int(round(0.7 * n_per_class)), int(round(0.15 * n_per_class))
    for k in range(n_classes):
        idx = rng.permutation(np.flatnonzero(y == k))
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    return Dataset(x, y, *(np.sort(np.concatenate(parts[s])) for s in ("train", "val", "test")),
                   n_classes=n_classes)


def mixture_means(n_classes: int, radius: float = 4.0) -> np.ndarray:
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def dump_dataset(dataset: Dataset, path: str | Path) -> None:
    """CSV with columns split,label,x0..x{d-1}; one row per sample."""
    split = np.full(len(dataset.y), "", dtype=object)
    for name in ("train", "val", "test"):
        split[getattr(dataset, name)] = name
    flat = dataset.x.reshape(len(dataset.x), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "label", *(f"x{i}" for i in range(flat.shape[1]))])
        for s, label, row in zip(split, dataset.y, flat):
            w.writerow([s, int(label), *(repr(float(v)) for v in row)])


def decode_cifar_records(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Binary CIFAR-10 records -> (images (n, 3, 32, 32) scaled to [-1, 1], labels)."""
    if len(raw) % CIFAR_RECORD:
        raise ValueError(f"truncated CIFAR-10 data: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        raise ValueError(f"CIFAR-10 label byte {labels.max()} > 9")
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 127.5 - 1.0
    return images, labels


def encode_cifar_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    pixels = np.rint((np.asarray(images) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    out = np.empty((len(labels), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = pixels.reshape(len(labels), -1)
    return out.tobytes()


def load_cifar10_binary(path: str | Path | None = None) -> Dataset:
    """Read the five train batches and the test batch from a cifar-10-batches-bin dir.

    The last 5000 training images form the validation split.  ``path``
    defaults to the ``IPMSSL_DATA_ROOT`` environment variable.
    """
    if path is None:
        path = os.environ.get(DATA_ROOT_ENV)
        if path is None:
            raise FileNotFoundError(f"no CIFAR-10 path given and ${DATA_ROOT_ENV} is unset")
    root = Path(path)
    xs, ys = [], []
    for name in (*CIFAR_TRAIN_FILES, CIFAR_TEST_FILE):
        x, y = decode_cifar_records((root / name).read_bytes())
        xs.append(x)
        ys.append(y)
    n_test = len(ys[-1])
    x, y = np.concatenate(xs), np.concatenate(ys)
    n_train_all = len(y) - n_test
    n_val = min(CIFAR_VALIDATION, n_train_all)
    idx = np.arange(len(y))
    return Dataset(x, y, train=idx[:n_train_all - n_val], val=idx[n_train_all - n_val:n_train_all],
                   test=idx[n_train_all:], n_classes=10)


def stratified_label_split(dataset: Dataset, n_labeled: int, seed: int) -> LabeledSplit:
    """Pick ``n_labeled`` training samples with per-class counts as equal as possible.

    Each class gets n // K; the n % K leftover slots go to classes drawn at
    random.  Selection within a class is uniform.
    """
    train = np.asarray(dataset.train)
    k = dataset.n_classes
    if n_labeled > len(train):
        raise ValueError(f"n_labeled={n_labeled} exceeds the {len(train)} training samples")
    if n_labeled < k:
        raise ValueError(f"n_labeled={n_labeled} is below the class count {k}")
    rng = np.random.default_rng(seed)
    if n_labeled == len(train):
        return LabeledSplit(np.sort(train), np.array([], dtype=train.dtype))
    by_class = [train[dataset.y[train] == c] for c in range(k)]
    quotas = np.full(k, n_labeled // k)
    extra = n_labeled % k
    if extra:
        eligible = [c for c in range(k) if len(by_class[c]) > quotas[c]]
        if len(eligible) < extra:
            raise ValueError("not enough classes with spare samples for the leftover labeled quota")
        quotas[rng.choice(eligible, size=extra, replace=False)] += 1
    picked = []
    for c in range(k):
        if len(by_class[c]) < quotas[c]:
            raise ValueError(f"class {c} has {len(by_class[c])} training samples, quota is {quotas[c]}")
        picked.append(rng.choice(by_class[c], size=quotas[c], replace=False))
    labeled = np.sort(np.concatenate(picked))
    unlabeled = np.setdiff1d(train, labeled)
    return LabeledSplit(labeled, unlabeled)


def noise_sampler(dim: int, batch: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """(batch, dim) i.i.d. standard normal noise."""
    if dim < 1:
        raise ValueError("noise dim must be >= 1")
    return torch.randn(batch, dim, dtype=DTYPE, generator=generator)


class IndexStream:
    """Endless stream of index batches, reshuffled on each pass.

    ``drop_last`` skips a short final batch of a pass.
    """

    def __init__(self, indices: np.ndarray, batch_size: int, rng: np.random.Generator,
                 drop_last: bool = False):
        if len(indices) == 0:
            raise ValueError("cannot batch an empty index set")
        self.indices = np.asarray(indices)
        self.batch_size = min(batch_size, len(self.indices))
        self.rng = rng
        self.drop_last = drop_last
        self._order = np.array([], dtype=self.indices.dtype)
        self._pos = 0

    def epoch_batches(self) -> list[np.ndarray]:
        order = self.rng.permutation(self.indices)
        stop = len(order) - len(order) % self.batch_size if self.drop_last else len(order)
        return [order[i:i + self.batch_size] for i in range(0, stop, self.batch_size)]

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.indices)
            self._pos = 0
        out = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def to_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(a), dtype=DTYPE)
