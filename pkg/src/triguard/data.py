"""Dataset container, CSV ingestion, normalization, splits, synthetic data.

Datasets are immutable after construction (arrays are marked read-only) and
safe to share across workers. Labels are always dense ids 0..C-1; the
original label values from a CSV are kept in `label_names` for reporting.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np


class ParseError(ValueError):
    """CSV value that cannot be used, with its file location."""

    def __init__(self, message: str, row: int, column: str):
        super().__init__(f"row {row}, column {column}: {message}")
        self.row = row
        self.column = column


class ClassTooSmallError(ValueError):
    pass


@dataclass
class Dataset:
    """Labeled numeric samples.

    samples : (n, d) float64 matrix, finite
    labels  : (n,) integer class ids in 0..class_count-1
    norm    : optional (d, 2) per-feature (min, max) used for normalization;
              present means feature values are in normalized units
    label_names : optional original label values, indexed by class id
    """

    samples: np.ndarray
    labels: np.ndarray
    class_count: int
    norm: np.ndarray | None = None
    label_names: list[str] | None = field(default=None, repr=False)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.ndim != 2:
            raise ValueError("samples must be a 2-D matrix")
        if labels.shape != (samples.shape[0],):
            raise ValueError("labels must have one entry per sample")
        if samples.shape[0] == 0:
            raise ValueError("dataset is empty")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain NaN or Inf")
        if self.class_count < 2:
            raise ValueError(f"need at least 2 classes, got {self.class_count}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.norm is not None:
            norm = np.asarray(self.norm, dtype=np.float64)
            if norm.shape != (samples.shape[1], 2):
                raise ValueError("norm must be a (d, 2) array of (min, max)")
            norm.setflags(write=False)
            object.__setattr__(self, "norm", norm)
        samples.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.samples.shape[1]

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def subset(self, indices: np.ndarray) -> "Dataset":
        return replace(self, samples=self.samples[indices],
                       labels=self.labels[indices])


@dataclass(frozen=True)
class SplitSpec:
    """Fractions for a train/validation split; the remainder is the test set."""

    train_fraction: float
    validation_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.train_fraction + self.validation_fraction >= 1.0:
            raise ValueError("train_fraction + validation_fraction must be < 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


# -- ingestion ---------------------------------------------------------------

def load_csv(path, label_column, has_header: bool = True) -> Dataset:
    """Load a labeled dataset from an RFC-4180-style CSV file.

    label_column may be a header name (requires has_header) or a zero-based
    column index. Labels are re-encoded densely in first-appearance order;
    feature column order is preserved. Row numbers in errors are 1-based file
    lines, counting the header.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [(lineno, row) for lineno, row in enumerate(reader, start=1)
                if any(cell.strip() for cell in row)]

    if not rows:
        raise ValueError(f"{path}: file contains no data rows")

    header: list[str] | None = None
    if has_header:
        header = [cell.strip() for cell in rows[0][1]]
        rows = rows[1:]
        if not rows:
            raise ValueError(f"{path}: file contains no data rows")

    ncols = len(rows[0][1])
    if isinstance(label_column, str):
        if header is None:
            raise ValueError("label column by name requires has_header=True")
        try:
            label_idx = header.index(label_column)
        except ValueError:
            raise ValueError(f"label column {label_column!r} not found in "
                             f"header {header}") from None
    else:
        label_idx = int(label_column)
        if not -ncols <= label_idx < ncols:
            raise ValueError(f"label column index {label_idx} out of range "
                             f"for {ncols} columns")
        label_idx %= ncols

    feature_idx = [j for j in range(ncols) if j != label_idx]
    if not feature_idx:
        raise ValueError("no feature columns besides the label column")

    def col_name(j: int) -> str:
        return header[j] if header else str(j)

    samples = np.empty((len(rows), len(feature_idx)), dtype=np.float64)
    raw_labels: list[str] = []
    for i, (lineno, row) in enumerate(rows):
        if len(row) != ncols:
            raise ParseError(f"expected {ncols} fields, found {len(row)}",
                             row=lineno, column="*")
        for jj, j in enumerate(feature_idx):
            text = row[j].strip()
            try:
                value = float(text)
            except ValueError:
                raise ParseError(f"cannot parse {text!r} as a number",
                                 row=lineno, column=col_name(j)) from None
            if not math.isfinite(value):
                raise ParseError(f"non-finite value {text!r}",
                                 row=lineno, column=col_name(j))
            samples[i, jj] = value
        raw_labels.append(row[label_idx].strip())

    mapping: dict[str, int] = {}
    labels = np.empty(len(raw_labels), dtype=np.int64)
    for i, value in enumerate(raw_labels):
        if value not in mapping:
            mapping[value] = len(mapping)
        labels[i] = mapping[value]
    if len(mapping) < 2:
        raise ValueError(f"{path}: dataset has a single class "
                         f"({next(iter(mapping))!r}); need at least 2")

    return Dataset(samples=samples, labels=labels, class_count=len(mapping),
                   label_names=list(mapping))


# -- normalization -----------------------------------------------------------

def minmax_normalize(ds: Dataset) -> Dataset:
    """Fit a per-feature affine map to [0, 1] on ds and apply it.

    Constant features map to 0. The fitted (min, max) pairs are stored in the
    result's `norm`, to be applied to held-out data with apply_normalization.
    """
    if ds.norm is not None:
        raise ValueError("dataset is already normalized")
    mins = ds.samples.min(axis=0)
    maxs = ds.samples.max(axis=0)
    norm = np.stack([mins, maxs], axis=1)
    return replace(ds, samples=_affine_to_unit(ds.samples, norm), norm=norm)


def apply_normalization(ds: Dataset, norm: np.ndarray) -> Dataset:
    """Apply stored (min, max) pairs to an un-normalized dataset.

    Values outside the fitted range are NOT clipped; the applicability stage
    must be able to see them.
    """
    if ds.norm is not None:
        raise ValueError("dataset is already normalized")
    norm = np.asarray(norm, dtype=np.float64)
    if norm.shape != (ds.feature_dim, 2):
        raise ValueError("norm shape does not match the dataset")
    return replace(ds, samples=_affine_to_unit(ds.samples, norm), norm=norm)


def denormalize(ds: Dataset) -> Dataset:
    if ds.norm is None:
        raise ValueError("dataset carries no normalization parameters")
    span = _spans(ds.norm)
    samples = ds.samples * span + ds.norm[:, 0]
    return replace(ds, samples=samples, norm=None)


def _spans(norm: np.ndarray) -> np.ndarray:
    span = norm[:, 1] - norm[:, 0]
    return np.where(span == 0.0, 1.0, span)


def _affine_to_unit(samples: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (samples - norm[:, 0]) / _spans(norm)


def normalize_vector(x: np.ndarray, norm: np.ndarray) -> np.ndarray:
    """Map one raw feature vector into normalized units (no clipping)."""
    return (np.asarray(x, dtype=np.float64) - norm[:, 0]) / _spans(norm)


# -- splitting ---------------------------------------------------------------

def stratified_split_indices(labels: np.ndarray, class_count: int,
                             spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index partition for (train, validation, test), stratified per class.

    Per-class counts are within one sample of the requested fractions, and
    every class keeps at least one sample in every split.
    """
    rng = np.random.default_rng(spec.seed)
    parts: tuple[list, list, list] = ([], [], [])
    for c in range(class_count):
        idx = np.flatnonzero(labels == c)
        n_c = idx.size
        if n_c < 3:
            raise ClassTooSmallError(
                f"class {c} has {n_c} samples; need at least 3 to split")
        idx = rng.permutation(idx)
        n_tr = int(math.floor(spec.train_fraction * n_c + 0.5))
        n_tr = min(max(n_tr, 1), n_c - 2)
        n_va = int(math.floor(spec.validation_fraction * n_c + 0.5))
        n_va = min(max(n_va, 1), n_c - n_tr - 1)
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def stratified_split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    train_idx, val_idx, test_idx = stratified_split_indices(
        ds.labels, ds.class_count, spec)
    return ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx)


# -- synthetic data ------------------------------------------------------------

XOR_CENTERS = np.array([(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)])


def gen_xor(n_per_quadrant: int, noise_sd: float, seed: int) -> Dataset:
    """Two-class XOR-labeled Gaussian clusters at (+-1, +-1).

    Quadrants whose center coordinates share a sign get label 0, the other
    two get label 1, so the classes are not linearly separable.
    """
    if n_per_quadrant < 1:
        raise ValueError("n_per_quadrant must be >= 1")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    rng = np.random.default_rng(seed)
    chunks, labels = [], []
    for cx, cy in XOR_CENTERS:
        pts = np.array([cx, cy]) + rng.normal(0.0, noise_sd, (n_per_quadrant, 2))
        chunks.append(pts)
        labels.append(np.full(n_per_quadrant, 0 if cx == cy else 1, dtype=np.int64))
    return Dataset(samples=np.concatenate(chunks),
                   labels=np.concatenate(labels), class_count=2)


def gen_blobs(n_per_class: int, centers, sd: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters, one class per center."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] < 2:
        raise ValueError("need at least 2 centers")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if not sd > 0:
        raise ValueError("sd must be > 0")
    rng = np.random.default_rng(seed)
    chunks, labels = [], []
    for c, center in enumerate(centers):
        pts = center + rng.normal(0.0, sd, (n_per_class, centers.shape[1]))
        chunks.append(pts)
        labels.append(np.full(n_per_class, c, dtype=np.int64))
    return Dataset(samples=np.concatenate(chunks),
                   labels=np.concatenate(labels), class_count=centers.shape[0])
