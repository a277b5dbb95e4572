"""Sample containers, synthetic pools and the delimited matrix file format.

File format
-----------
A plain-text, comma-delimited matrix. The first line is a header of three
integers ``rows,cols,label_col``; ``rows`` lines of ``cols`` numbers follow.
Column ``label_col`` holds the label (cast to int for classification pools);
the remaining columns are features in their original order. Lines starting
with ``#`` after the header are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SampleBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else x.reshape(0, 0)
        if x.ndim != 2:
            raise ValueError("features must be a matrix")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError(f"{x.shape[0]} feature rows but labels of shape {y.shape}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "SampleBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleBatch(self.features[idx], self.labels[idx])

    @staticmethod
    def concat(batches) -> "SampleBatch":
        batches = list(batches)
        if not batches:
            raise ValueError("nothing to concatenate")
        return SampleBatch(
            np.concatenate([b.features for b in batches], axis=0),
            np.concatenate([b.labels for b in batches]),
        )

    @staticmethod
    def empty(dim: int, label_dtype=np.int64) -> "SampleBatch":
        return SampleBatch(np.zeros((0, dim)), np.zeros(0, dtype=label_dtype))


def gaussian_blobs(n: int, dim: int, num_classes: int, rng: np.random.Generator,
                   separation: float = 2.0, centers: np.ndarray | None = None) -> tuple[SampleBatch, np.ndarray]:
    """Balanced class-conditional Gaussian blobs with unit covariance.

    Returns the batch and the class centers so a held-out set can reuse them.
    """
    if centers is None:
        centers = rng.normal(scale=separation / np.sqrt(dim), size=(num_classes, dim))
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    x = centers[labels] + rng.normal(size=(n, dim))
    return SampleBatch(x, labels.astype(np.int64)), centers


def logistic_teacher(n: int, dim: int, num_classes: int, rng: np.random.Generator,
                     scale: float = 3.0, teacher: np.ndarray | None = None) -> tuple[SampleBatch, np.ndarray]:
    """Features ~ N(0, I); labels drawn from a softmax ground-truth model."""
    if teacher is None:
        teacher = rng.normal(scale=scale / np.sqrt(dim), size=(num_classes, dim))
    x = rng.normal(size=(n, dim))
    logits = x @ teacher.T
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(n)[:, None]
    labels = (p.cumsum(axis=1) < u).sum(axis=1)
    labels = np.minimum(labels, num_classes - 1)
    return SampleBatch(x, labels.astype(np.int64)), teacher


def save_matrix(path, batch: SampleBatch, label_col: int | None = None) -> None:
    x, y = batch.features, batch.labels
    k = x.shape[1] if label_col is None else label_col
    if not 0 <= k <= x.shape[1]:
        raise ValueError("label column out of range")
    mat = np.insert(x, k, y.astype(np.float64), axis=1)
    with open(path, "w") as fh:
        fh.write(f"{mat.shape[0]},{mat.shape[1]},{k}\n")
        np.savetxt(fh, mat, delimiter=",", fmt="%.17g")


def load_matrix(path, integer_labels: bool = True) -> SampleBatch:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
        try:
            rows, cols, k = (int(v) for v in header.split(","))
        except ValueError as exc:
            raise ValueError(f"{path}: bad header {header!r}, expected rows,cols,label_col") from exc
        mat = np.loadtxt(fh, delimiter=",", comments="#", ndmin=2)
    if rows == 0:
        mat = np.zeros((0, cols))
    if mat.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, body is {mat.shape[0]}x{mat.shape[1]}")
    if not 0 <= k < cols:
        raise ValueError(f"{path}: label column {k} outside 0..{cols - 1}")
    y = mat[:, k]
    if integer_labels:
        if np.any(y != np.round(y)):
            raise ValueError(f"{path}: non-integer class labels")
        y = y.astype(np.int64)
    return SampleBatch(np.delete(mat, k, axis=1), y)
