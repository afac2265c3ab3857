"""Datasets: an (inputs, labels) pair plus deterministic synthetic generators."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y).astype(np.int64)
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return int(self.y.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx])

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([self.x, other.x]), np.concatenate([self.y, other.y]))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield ``(x, y)`` minibatches; shuffled when ``rng`` is given."""
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            yield self.x[idx], self.y[idx]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)

    __hash__ = None


class Split(NamedTuple):
    train: Dataset
    test: Dataset


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "rings"
    classes: int = 2
    n_train: int = 2000
    n_test: int = 500
    dims: int = 2
    image_size: int = 8
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("blobs", "rings", "grid-image"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.classes < 1 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("classes, n_train and n_test must be positive")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.kind == "rings" and self.dims != 2:
            raise ValueError("rings are two-dimensional")
        if self.kind == "grid-image" and self.image_size < 2:
            raise ValueError("image_size must be at least 2")

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.kind == "grid-image":
            return (1, self.image_size, self.image_size)
        return (self.dims,)


def balanced_labels(n: int, classes: int) -> np.ndarray:
    """Class labels with counts differing by at most one."""
    return np.arange(n) % classes


def _blob_centroids(classes: int, dims: int, rng) -> np.ndarray:
    return rng.uniform(0.2, 0.8, size=(classes, dims))


def _rings(labels, classes, noise, rng):
    radii = 0.4 * (labels + 1) / classes
    theta = rng.uniform(0.0, 2 * np.pi, size=labels.shape[0])
    r = radii + noise * rng.standard_normal(labels.shape[0])
    pts = 0.5 + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return np.clip(pts, 0.0, 1.0)


def _grid_images(labels, classes, size, noise, rng):
    # class c lights up a distinct horizontal band of rows
    imgs = np.zeros((labels.shape[0], 1, size, size))
    bands = np.array_split(np.arange(size), classes)
    for c, rows in enumerate(bands):
        if len(rows):
            imgs[labels == c, 0, rows[0] : rows[-1] + 1, :] = 1.0
    imgs = 0.15 + 0.7 * imgs + noise * rng.standard_normal(imgs.shape)
    return np.clip(imgs, 0.0, 1.0)


def make_synthetic_dataset(spec: DatasetSpec) -> Split:
    """Train/test split drawn from one seeded stream; features lie in [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_test
    train_y = balanced_labels(spec.n_train, spec.classes)
    test_y = balanced_labels(spec.n_test, spec.classes)
    labels = np.concatenate([train_y, test_y])
    if spec.kind == "blobs":
        centroids = _blob_centroids(spec.classes, spec.dims, rng)
        x = centroids[labels] + spec.noise * rng.standard_normal((n, spec.dims))
        x = np.clip(x, 0.0, 1.0)
    elif spec.kind == "rings":
        x = _rings(labels, spec.classes, spec.noise, rng)
    else:
        x = _grid_images(labels, spec.classes, spec.image_size, spec.noise, rng)
    perm_tr = rng.permutation(spec.n_train)
    perm_te = spec.n_train + rng.permutation(spec.n_test)
    return Split(
        Dataset(x[perm_tr], labels[perm_tr]),
        Dataset(x[perm_te], labels[perm_te]),
    )


def write_csv(dataset: Dataset, path) -> None:
    flat = dataset.x.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(flat.shape[1])])
        for label, row in zip(dataset.y, flat):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def read_csv(path, input_shape: tuple[int, ...] | None = None) -> Dataset:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["label"]:
        raise ValueError(f"{path}: expected a 'label,f0,f1,...' header")
    body = rows[1:]
    y = np.array([int(r[0]) for r in body], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
    if input_shape is not None:
        x = x.reshape((len(body),) + tuple(input_shape))
    return Dataset(x, y)
