"""Synthetic 2-D classification tasks and the CSV dataset format."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ParseError, SpecError

BLOB_RADIUS = 4.0
SPIRAL_RADIUS = 6.0


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    split_tag: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise SpecError(
                f"features {self.features.shape} and labels {self.labels.shape} do not line up"
            )
        if len(self.labels) < 1:
            raise SpecError("a dataset needs at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise SpecError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _check(classes: int, per_class: int) -> None:
    if classes < 2:
        raise SpecError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise SpecError(f"need at least 1 sample per class, got {per_class}")


def _split_rngs(seed: int):
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(train_ss), np.random.default_rng(test_ss)


def _finish(x: np.ndarray, y: np.ndarray, classes: int, tag: str, rng) -> Dataset:
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], classes, tag)


def _blobs(classes, per_class, spread, rng, tag):
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = BLOB_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    y = np.repeat(np.arange(classes), per_class)
    x = centers[y] + spread * rng.standard_normal((len(y), 2))
    return _finish(x, y, classes, tag, rng)


def make_blobs(classes: int, per_class: int, spread: float, seed: int) -> tuple[Dataset, Dataset]:
    """Gaussian clusters centred on a circle of radius 4; returns ``(train, test)``.

    The two splits come from independent child streams of ``seed``.
    """
    if not spread > 0:
        raise SpecError(f"spread must be positive, got {spread}")
    _check(classes, per_class)
    r_train, r_test = _split_rngs(seed)
    return (
        _blobs(classes, per_class, spread, r_train, "train"),
        _blobs(classes, per_class, spread, r_test, "test"),
    )


def _spirals(classes, per_class, noise, turns, rng, tag):
    y = np.repeat(np.arange(classes), per_class)
    s = rng.uniform(0.0, 1.0, size=len(y))
    theta = 2 * np.pi * turns * s + 2 * np.pi * y / classes
    r = SPIRAL_RADIUS * s
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    x = x + noise * rng.standard_normal(x.shape)
    return _finish(x, y, classes, tag, rng)


def make_spirals(
    classes: int, per_class: int, noise: float, turns: float, seed: int
) -> tuple[Dataset, Dataset]:
    """Interleaved Archimedean spiral arms with isotropic Gaussian noise.

    Arm ``k`` follows ``r = SPIRAL_RADIUS * s``, ``theta = 2 pi (turns s + k / C)`` for
    ``s ~ U[0, 1)``. Returns ``(train, test)`` with ``per_class`` points per
    class in each split.
    """
    _check(classes, per_class)
    if noise < 0:
        raise SpecError(f"noise must be non-negative, got {noise}")
    if not turns > 0:
        raise SpecError(f"turns must be positive, got {turns}")
    r_train, r_test = _split_rngs(seed)
    return (
        _spirals(classes, per_class, noise, turns, r_train, "train"),
        _spirals(classes, per_class, noise, turns, r_test, "test"),
    )


CANONICAL_SPIRALS = dict(classes=3, per_class=500, noise=0.35, turns=1.75)


def canonical_task(seed: int = 0) -> tuple[Dataset, Dataset]:
    """The standardized 3-arm spirals task used for the ablation runs."""
    return standardize(*make_spirals(seed=seed, **CANONICAL_SPIRALS))


def standardize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    """Zero-mean/unit-variance features using train-split statistics only."""
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (
        replace(train, features=(train.features - mu) / sd),
        replace(test, features=(test.features - mu) / sd),
    )


def rotate(ds: Dataset, angle: float) -> Dataset:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return replace(ds, features=ds.features @ rot.T)


# ---------------------------------------------------------------------------
# CSV format
# ---------------------------------------------------------------------------

def dumps_dataset(ds: Dataset) -> str:
    buf = io.StringIO()
    d = ds.dim
    buf.write(",".join([f"x{i}" for i in range(d)] + ["label"]) + "\n")
    for row, label in zip(ds.features, ds.labels):
        buf.write(",".join("%.17g" % v for v in row) + f",{int(label)}\n")
    return buf.getvalue()


def save_dataset(ds: Dataset, path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dumps_dataset(ds))
    return path


def loads_dataset(text: str, class_count: Optional[int] = None, split_tag: str = "train") -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ParseError("empty file", line=1)
    header = rows[0]
    d = len(header) - 1
    if d < 1 or header != [f"x{i}" for i in range(d)] + ["label"]:
        raise ParseError(f"bad header {header!r}", line=1)
    if len(rows) == 1:
        raise ParseError("no data rows", line=2)
    feats = np.empty((len(rows) - 1, d))
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != d + 1:
            raise ParseError(f"expected {d + 1} fields, got {len(row)}", line=lineno)
        try:
            feats[i] = [float(v) for v in row[:d]]
        except ValueError as exc:
            raise ParseError(f"bad feature value: {exc}", line=lineno) from None
        if not np.all(np.isfinite(feats[i])):
            raise ParseError("non-finite feature value", line=lineno)
        try:
            label = int(row[d])
        except ValueError:
            raise ParseError(f"bad label {row[d]!r}", line=lineno) from None
        if label < 0 or (class_count is not None and label >= class_count):
            raise ParseError(f"label {label} outside [0, {class_count})", line=lineno)
        labels[i] = label
    classes = class_count if class_count is not None else int(labels.max()) + 1
    return Dataset(feats, labels, max(classes, 2), split_tag)


def load_dataset(path, class_count: Optional[int] = None, split_tag: Optional[str] = None) -> Dataset:
    path = Path(path)
    if split_tag is None:
        split_tag = "test" if "test" in path.stem else "train"
    return loads_dataset(path.read_text(encoding="utf-8"), class_count, split_tag)
