"""Three chained rejection stages fitted from training data.

Stage 1 (applicability) rejects feature values outside per-class quantile
boxes. Stage 2 (reliability) rejects samples whose mean distance to their
k nearest same-class training neighbors exceeds a calibrated threshold.
Stage 3 (decidability) rejects samples whose predicted class is rare among
the k nearest training neighbors overall. A sample is rejected as soon as
any enabled stage fires; later stages are never consulted.

Calibration lives on a validation split, grouped by TRUE label: stage 2
records the q-quantile of mean neighbor distances per class, stage 3 the
lower-tail (1-q)-quantile of predicted-class neighbor fractions. With q=1
the thresholds sit at the extremes of the calibration pool and, because the
reject comparisons are strict, the calibration pool itself is never
rejected. For q<1 each stage standalone rejects roughly a (1-q) share of
fresh benign inputs.

Stage 1 splits its (1-q) rejection budget across both tails of every
feature: box edges are the (1-q)/(2d) and 1-(1-q)/(2d) order-statistic
quantiles per feature, so the union of all per-feature tail events stays
close to the 1-q target regardless of the feature count. q=1 recovers the
exact per-class min/max box.

All quantiles are sorted-order statistics with linear interpolation
(numpy's default), used identically in the three stages.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .balltree import BallTree
from .classifiers import Classifier
from .data import ClassTooSmallError, Dataset
from .metrics import Metric

DEFAULT_K_RELIABILITY = 10
DEFAULT_K_DECIDABILITY = 100


def _check_quantile(q: float):
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile must be in (0, 1], got {q}")


# ---------------------------------------------------------------------------
# Stage 1: applicability
# ---------------------------------------------------------------------------

class ApplicabilityStage:
    """Per-class bounding boxes over (optionally noise-augmented) features."""

    stage_id = 1

    def __init__(self, lows: np.ndarray, highs: np.ndarray, q: float,
                 noise_sd: float = 0.0):
        self.lows = np.asarray(lows, dtype=np.float64)
        self.highs = np.asarray(highs, dtype=np.float64)
        if self.lows.shape != self.highs.shape or self.lows.ndim != 2:
            raise ValueError("lows/highs must be matching (C, d) arrays")
        if np.any(self.lows > self.highs):
            raise ValueError("box lower bounds exceed upper bounds")
        self.q = q
        self.noise_sd = noise_sd
        self.check_count = 0

    @classmethod
    def fit(cls, train: Dataset, q: float = 1.0, noise_sd: float = 0.0,
            seed: int = 0) -> "ApplicabilityStage":
        _check_quantile(q)
        if noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        d = train.feature_dim
        side = (1.0 - q) / (2.0 * d)
        rng = np.random.default_rng(seed)
        lows = np.empty((train.class_count, d))
        highs = np.empty((train.class_count, d))
        for c in range(train.class_count):
            pts = train.samples[train.labels == c]
            if pts.shape[0] == 0:
                raise ClassTooSmallError(f"class {c} has no training samples")
            if noise_sd > 0:
                # augment with one jittered copy per point; widens the box
                pts = np.concatenate([pts, pts + rng.normal(0.0, noise_sd, pts.shape)])
            lows[c] = np.quantile(pts, side, axis=0)
            highs[c] = np.quantile(pts, 1.0 - side, axis=0)
        return cls(lows, highs, q, noise_sd)

    def accepts(self, x: np.ndarray, label: int) -> bool:
        """Inclusive box membership: boundary points are accepted."""
        self.check_count += 1
        return bool(np.all(x >= self.lows[label]) and np.all(x <= self.highs[label]))

    def accepts_batch(self, X: np.ndarray, label: int) -> np.ndarray:
        self.check_count += X.shape[0]
        return (np.all(X >= self.lows[label], axis=1)
                & np.all(X <= self.highs[label], axis=1))

    def to_dict(self) -> dict:
        return {"q": self.q, "noise_sd": self.noise_sd,
                "lows": self.lows.tolist(), "highs": self.highs.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "ApplicabilityStage":
        return cls(np.array(payload["lows"]), np.array(payload["highs"]),
                   payload["q"], payload["noise_sd"])


# ---------------------------------------------------------------------------
# Stage 2: reliability
# ---------------------------------------------------------------------------

class ReliabilityStage:
    """Mean distance to the k nearest same-class training neighbors."""

    stage_id = 2

    def __init__(self, trees: list[BallTree], thresholds: np.ndarray,
                 k: int, q: float, metric: Metric):
        self.trees = trees
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        self.k = k
        self.q = q
        self.metric = metric
        self.check_count = 0

    @classmethod
    def fit(cls, train: Dataset, validation: Dataset,
            k: int = DEFAULT_K_RELIABILITY, q: float = 1.0,
            metric: Metric = Metric.L2) -> "ReliabilityStage":
        _check_quantile(q)
        trees = []
        for c in range(train.class_count):
            pts = train.samples[train.labels == c]
            if pts.shape[0] <= k:
                raise ClassTooSmallError(
                    f"class {c} has {pts.shape[0]} training samples; "
                    f"need more than k={k}")
            trees.append(BallTree.build(pts, metric=metric))
        thresholds = np.empty(train.class_count)
        for c in range(train.class_count):
            vals = validation.samples[validation.labels == c]
            if vals.shape[0] == 0:
                raise ClassTooSmallError(f"class {c} has no validation samples")
            means = [_mean_knn_distance(trees[c], x, k, exclude_self=True)
                     for x in vals]
            thresholds[c] = np.quantile(np.array(means), q)
        return cls(trees, thresholds, k, q, metric)

    def mean_neighbor_distance(self, x: np.ndarray, label: int) -> float:
        return _mean_knn_distance(self.trees[label], x, self.k, exclude_self=False)

    def accepts(self, x: np.ndarray, label: int) -> bool:
        """Reject strictly above the class threshold."""
        self.check_count += 1
        return not self.mean_neighbor_distance(x, label) > self.thresholds[label]

    def to_dict(self) -> dict:
        return {"k": self.k, "q": self.q, "thresholds": self.thresholds.tolist()}


def _mean_knn_distance(tree: BallTree, x: np.ndarray, k: int,
                       exclude_self: bool) -> float:
    """Mean distance to the k nearest points, optionally dropping one
    exact zero-distance match (a calibration sample that is also a
    training point must not count itself as a neighbor)."""
    if exclude_self:
        hits = tree.query(x, k + 1)
        for i, (payload, dist) in enumerate(hits):
            if dist == 0.0 and np.array_equal(tree.points[payload], x):
                hits = hits[:i] + hits[i + 1:]
                break
        hits = hits[:k]
    else:
        hits = tree.query(x, k)
    return float(np.mean([d for _, d in hits]))


# ---------------------------------------------------------------------------
# Stage 3: decidability
# ---------------------------------------------------------------------------

class DecidabilityStage:
    """Fraction of the predicted class among the k nearest training points."""

    stage_id = 3

    def __init__(self, tree: BallTree, labels: np.ndarray,
                 thresholds: np.ndarray, k: int, q: float, metric: Metric):
        self.tree = tree
        self.labels = np.asarray(labels, dtype=np.int64)
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        self.k = k
        self.q = q
        self.metric = metric
        self.check_count = 0

    @classmethod
    def fit(cls, train: Dataset, validation: Dataset,
            k: int = DEFAULT_K_DECIDABILITY, q: float = 1.0,
            metric: Metric = Metric.L2) -> "DecidabilityStage":
        _check_quantile(q)
        if k >= train.n_samples:
            raise ValueError(f"k={k} must be smaller than the training set "
                             f"({train.n_samples})")
        tree = BallTree.build(train.samples, metric=metric)
        thresholds = np.empty(train.class_count)
        for c in range(train.class_count):
            vals = validation.samples[validation.labels == c]
            if vals.shape[0] == 0:
                raise ClassTooSmallError(f"class {c} has no validation samples")
            fracs = [_label_fraction(tree, train.labels, x, k, c) for x in vals]
            # rejection fires BELOW the threshold, so the budget sits in the
            # lower tail: q=1 puts the threshold at the pool minimum
            thresholds[c] = np.quantile(np.array(fracs), 1.0 - q)
        return cls(tree, train.labels, thresholds, k, q, metric)

    def label_fraction(self, x: np.ndarray, label: int) -> float:
        return _label_fraction(self.tree, self.labels, x, self.k, label)

    def accepts(self, x: np.ndarray, label: int) -> bool:
        """Reject strictly below the class threshold."""
        self.check_count += 1
        return not self.label_fraction(x, label) < self.thresholds[label]

    def to_dict(self) -> dict:
        return {"k": self.k, "q": self.q, "thresholds": self.thresholds.tolist()}


def _label_fraction(tree: BallTree, labels: np.ndarray, x: np.ndarray,
                    k: int, label: int) -> float:
    idx = tree.query_payloads(x, k)
    return float(np.count_nonzero(labels[idx] == label)) / k


# ---------------------------------------------------------------------------
# chained detector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    accepted: bool
    firing_stage: int | None = None  # first stage that rejected, if any


@dataclass
class DetectorSettings:
    """Hyperparameters for fitting the full chain."""

    k_reliability: int = DEFAULT_K_RELIABILITY
    k_decidability: int = DEFAULT_K_DECIDABILITY
    q_applicability: float = 1.0
    q_reliability: float = 1.0
    q_decidability: float = 1.0
    metric: Metric = Metric.L2
    noise_sd: float = 0.0
    stages: tuple[int, ...] = (1, 2, 3)
    seed: int = 0


class ChainedDetector:
    """Runs the enabled stages in order 1 -> 2 -> 3 with short-circuiting."""

    def __init__(self, applicability: ApplicabilityStage | None = None,
                 reliability: ReliabilityStage | None = None,
                 decidability: DecidabilityStage | None = None,
                 enabled: tuple[bool, bool, bool] = (True, True, True),
                 train_samples: np.ndarray | None = None,
                 train_labels: np.ndarray | None = None):
        self._stages = (applicability, reliability, decidability)
        self.enabled = tuple(bool(e) for e in enabled)
        self.train_samples = train_samples
        self.train_labels = train_labels

    @property
    def stages(self) -> tuple:
        return self._stages

    def stage(self, stage_id: int):
        return self._stages[stage_id - 1]

    def detect(self, x: np.ndarray, label: int) -> Detection:
        """Verdict for input x under predicted class `label`.

        Rejects with the first enabled stage that fires; later stages are
        not evaluated (observable through the stages' check counters).
        """
        x = np.asarray(x, dtype=np.float64)
        for stage_id, (stage, on) in enumerate(zip(self._stages, self.enabled), start=1):
            if not on:
                continue
            if stage is None:
                raise RuntimeError(f"stage {stage_id} is enabled but not fitted")
            if not stage.accepts(x, label):
                return Detection(accepted=False, firing_stage=stage_id)
        return Detection(accepted=True)

    def rejects(self, x: np.ndarray, label: int) -> bool:
        return not self.detect(x, label).accepted

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        if self.train_samples is None or self.train_labels is None:
            raise ValueError("detector was not fitted through fit_detector; "
                             "training data is required for serialization")
        s1, s2, s3 = self._stages
        metric = (s2 or s3).metric if (s2 or s3) else Metric.L2
        return {
            "format": "triguard.detector/1",
            "metric": metric.value,
            "enabled": list(self.enabled),
            "train": {
                "points": self.train_samples.tolist(),
                "labels": self.train_labels.tolist(),
                "hash": training_hash(self.train_samples, self.train_labels),
            },
            "applicability": s1.to_dict() if s1 else None,
            "reliability": s2.to_dict() if s2 else None,
            "decidability": s3.to_dict() if s3 else None,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ChainedDetector":
        if payload.get("format") != "triguard.detector/1":
            raise ValueError(f"unknown detector format tag "
                             f"{payload.get('format')!r}")
        metric = Metric.from_name(payload["metric"])
        samples = np.array(payload["train"]["points"], dtype=np.float64)
        labels = np.array(payload["train"]["labels"], dtype=np.int64)
        stored = payload["train"]["hash"]
        if training_hash(samples, labels) != stored:
            warnings.warn("detector training data does not match its stored "
                          "content hash; thresholds may be stale", UserWarning)
        class_count = int(labels.max()) + 1

        s1 = s2 = s3 = None
        if payload["applicability"] is not None:
            s1 = ApplicabilityStage.from_dict(payload["applicability"])
        if payload["reliability"] is not None:
            blob = payload["reliability"]
            trees = [BallTree.build(samples[labels == c], metric=metric)
                     for c in range(class_count)]
            s2 = ReliabilityStage(trees, np.array(blob["thresholds"]),
                                  blob["k"], blob["q"], metric)
        if payload["decidability"] is not None:
            blob = payload["decidability"]
            tree = BallTree.build(samples, metric=metric)
            s3 = DecidabilityStage(tree, labels, np.array(blob["thresholds"]),
                                   blob["k"], blob["q"], metric)
        return cls(s1, s2, s3, enabled=tuple(payload["enabled"]),
                   train_samples=samples, train_labels=labels)


def training_hash(samples: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(samples, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(labels, dtype=np.int64).tobytes())
    h.update(str(samples.shape).encode())
    return h.hexdigest()


def fit_detector(train: Dataset, validation: Dataset,
                 settings: DetectorSettings | None = None) -> ChainedDetector:
    """Fit the enabled stages on the training split, calibrating thresholds
    on the validation split."""
    settings = settings or DetectorSettings()
    s1 = s2 = s3 = None
    if 1 in settings.stages:
        s1 = ApplicabilityStage.fit(train, q=settings.q_applicability,
                                    noise_sd=settings.noise_sd,
                                    seed=settings.seed)
    if 2 in settings.stages:
        s2 = ReliabilityStage.fit(train, validation, k=settings.k_reliability,
                                  q=settings.q_reliability,
                                  metric=settings.metric)
    if 3 in settings.stages:
        s3 = DecidabilityStage.fit(train, validation,
                                   k=settings.k_decidability,
                                   q=settings.q_decidability,
                                   metric=settings.metric)
    enabled = tuple(i in settings.stages for i in (1, 2, 3))
    return ChainedDetector(s1, s2, s3, enabled=enabled,
                           train_samples=train.samples,
                           train_labels=train.labels)


def save_detector(path, detector: ChainedDetector):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(detector.to_dict(), fh)


def load_detector(path) -> ChainedDetector:
    with open(path, encoding="utf-8") as fh:
        return ChainedDetector.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# 2-D rejection-region rasters
# ---------------------------------------------------------------------------

@dataclass
class RegionGrids:
    """Accept/reject rasters over a 2-D box, one layer per (stage, class).

    Arrays are indexed [class, iy, ix]; True marks rejection. `chained` is
    evaluated through detect() and therefore reflects short-circuiting,
    while per-stage layers query each stage directly.
    """

    xs: np.ndarray
    ys: np.ndarray
    stage_reject: dict[int, np.ndarray] = field(default_factory=dict)
    chained_reject: np.ndarray | None = None
    predicted_class: np.ndarray | None = None


def reject_region_grid(detector: ChainedDetector, classifier: Classifier,
                       bounds, resolution: int) -> RegionGrids:
    """Evaluate every enabled stage and the chained verdict on a grid of
    cell centers, for every class label. Requires 2-D features."""
    (x_lo, x_hi), (y_lo, y_hi) = bounds
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    stages = [s for s, on in zip(detector.stages, detector.enabled) if on]
    if not stages or any(s is None for s in stages):
        raise RuntimeError("detector has no fitted, enabled stages")
    for s in stages:
        dim = (s.lows.shape[1] if isinstance(s, ApplicabilityStage)
               else s.trees[0].points.shape[1] if isinstance(s, ReliabilityStage)
               else s.tree.points.shape[1])
        if dim != 2:
            raise ValueError("region grids require 2-D features")

    xs = x_lo + (np.arange(resolution) + 0.5) * (x_hi - x_lo) / resolution
    ys = y_lo + (np.arange(resolution) + 0.5) * (y_hi - y_lo) / resolution
    points = np.array([(x, y) for y in ys for x in xs])
    class_count = classifier.class_count

    grids = RegionGrids(xs=xs, ys=ys)
    shape = (class_count, resolution, resolution)
    for stage in stages:
        layer = np.zeros(shape, dtype=bool)
        for c in range(class_count):
            if isinstance(stage, ApplicabilityStage):
                rej = ~stage.accepts_batch(points, c)
            else:
                rej = np.array([not stage.accepts(p, c) for p in points])
            layer[c] = rej.reshape(resolution, resolution)
        grids.stage_reject[stage.stage_id] = layer

    chained = np.zeros(shape, dtype=bool)
    for c in range(class_count):
        rej = np.array([detector.rejects(p, c) for p in points])
        chained[c] = rej.reshape(resolution, resolution)
    grids.chained_reject = chained
    grids.predicted_class = classifier.predict_batch(points).reshape(
        resolution, resolution)
    return grids
