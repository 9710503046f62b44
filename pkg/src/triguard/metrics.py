"""Distance metrics shared by the neighbor index, detector stages, and attacks.

Cosine is handled as the distance 1 - cos(a, b). It is not a true metric
(no triangle inequality), so the ball tree prunes it in a transformed space;
see balltree.py. Zero vectors are rejected under cosine.
"""

from __future__ import annotations

import enum

import numpy as np


class Metric(enum.Enum):
    L1 = "l1"
    L2 = "l2"
    COSINE = "cosine"

    @classmethod
    def from_name(cls, name: str) -> "Metric":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown metric {name!r}; expected one of "
                             f"{[m.value for m in cls]}") from None


def point_distance(metric: Metric, a: np.ndarray, b: np.ndarray) -> float:
    """Distance between two vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if metric is Metric.L1:
        return float(np.sum(np.abs(a - b)))
    if metric is Metric.L2:
        return float(np.sqrt(np.sum((a - b) ** 2)))
    na = float(np.sqrt(np.sum(a * a)))
    nb = float(np.sqrt(np.sum(b * b)))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance is undefined for zero vectors")
    return float(1.0 - np.dot(a, b) / (na * nb))


def distances_to_point(metric: Metric, points: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Distances from every row of `points` to the vector `x`."""
    points = np.asarray(points, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if metric is Metric.L1:
        return np.sum(np.abs(points - x), axis=1)
    if metric is Metric.L2:
        return np.sqrt(np.sum((points - x) ** 2, axis=1))
    norms = np.sqrt(np.sum(points * points, axis=1))
    nx = float(np.sqrt(np.sum(x * x)))
    if nx == 0.0 or np.any(norms == 0.0):
        raise ValueError("cosine distance is undefined for zero vectors")
    return 1.0 - (points @ x) / (norms * nx)
