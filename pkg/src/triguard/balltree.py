"""Exact k-nearest-neighbor search over a fixed point set.

The tree is a binary hierarchy of balls: each node stores a centroid and the
radius covering every point in its subtree, so a query can skip a whole
subtree whenever the lower-bound distance to its ball already exceeds the
current k-th best. Leaves are scanned with vectorized distance rows, which
keeps queries exact: results always equal a brute-force scan under the same
metric and tie policy (lower payload index wins on equal distance).

Storage is flat arrays rather than node objects: `_order` is a permutation of
the input rows, nodes own contiguous slices [start, end) of it, and children
are stored by index. Splits cut the widest-spread dimension at the median
position, so internal nodes always have exactly two non-empty children.

Cosine needs care because 1 - cos(a, b) violates the triangle inequality.
All pruning geometry therefore lives in a "prune space": the points
themselves for L1/L2, unit-normalized copies for cosine. For unit vectors
``|a - b|^2 = 2 (1 - cos)``, so a Euclidean lower bound ``e`` in prune space
gives the cosine lower bound ``e^2 / 2``. Reported distances are always
computed with the canonical formulas in metrics.py, never the prune-space
surrogate.
"""

from __future__ import annotations

import heapq

import numpy as np

from .metrics import Metric, distances_to_point

DEFAULT_LEAF_SIZE = 32


class BallTree:
    """Immutable exact k-NN index. Build once, query from any thread."""

    def __init__(self, points, payload, metric, leaf_size, _nodes):
        self.points = points
        self.payload = payload
        self.metric = metric
        self.leaf_size = leaf_size
        (self._prune_pts, self._order, self._centers, self._radii,
         self._left, self._right, self._start, self._end) = _nodes

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, points: np.ndarray, payload: np.ndarray | None = None,
              metric: Metric = Metric.L2,
              leaf_size: int = DEFAULT_LEAF_SIZE) -> "BallTree":
        points = np.array(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] == 0:
            raise ValueError("points must be a non-empty 2-D array")
        if not np.all(np.isfinite(points)):
            raise ValueError("points must be finite")
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        if payload is None:
            payload = np.arange(points.shape[0], dtype=np.int64)
        else:
            payload = np.asarray(payload, dtype=np.int64)
            if payload.shape != (points.shape[0],):
                raise ValueError("payload must have one entry per point")
        points.setflags(write=False)
        payload.setflags(write=False)

        if metric is Metric.COSINE:
            norms = np.sqrt(np.sum(points * points, axis=1))
            if np.any(norms == 0.0):
                raise ValueError("cosine metric cannot index zero vectors")
            prune_pts = points / norms[:, None]
            prune_metric = Metric.L2
        else:
            prune_pts = points
            prune_metric = metric

        m = points.shape[0]
        order = np.arange(m, dtype=np.int64)
        centers, radii, left, right, start, end = [], [], [], [], [], []

        def make_node(lo: int, hi: int) -> int:
            node = len(centers)
            idx = order[lo:hi]
            sub = prune_pts[idx]
            center = sub.mean(axis=0)
            radius = float(distances_to_point(prune_metric, sub, center).max())
            centers.append(center)
            radii.append(radius)
            start.append(lo)
            end.append(hi)
            left.append(-1)
            right.append(-1)
            if hi - lo > leaf_size:
                spread = sub.max(axis=0) - sub.min(axis=0)
                dim = int(np.argmax(spread))
                # stable sort keeps construction deterministic for tied values
                order[lo:hi] = idx[np.argsort(sub[:, dim], kind="stable")]
                mid = lo + (hi - lo) // 2
                left[node] = make_node(lo, mid)
                right[node] = make_node(mid, hi)
            return node

        # median splits keep the tree balanced, so recursion depth is O(log m)
        make_node(0, m)

        nodes = (prune_pts, order,
                 np.array(centers), np.array(radii),
                 np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                 np.array(start, dtype=np.int64), np.array(end, dtype=np.int64))
        return cls(points, payload, metric, leaf_size, nodes)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def node_count(self) -> int:
        return len(self._radii)

    # -- queries -----------------------------------------------------------

    def query(self, x: np.ndarray, k: int) -> list[tuple[int, float]]:
        """k nearest neighbors of x as (payload, distance), ascending.

        Exact: equal (as an ordered list) to a brute-force scan sorted by
        (distance, payload).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.points.shape[1],):
            raise ValueError(f"query dimension {x.shape} does not match "
                             f"index dimension ({self.points.shape[1]},)")
        if not np.all(np.isfinite(x)):
            raise ValueError("query point must be finite")
        if not 1 <= k <= self.size:
            raise ValueError(f"k={k} must be in [1, {self.size}]")

        metric = self.metric
        if metric is Metric.COSINE:
            nx = float(np.sqrt(np.sum(x * x)))
            if nx == 0.0:
                raise ValueError("cosine distance is undefined for zero vectors")
            qp = x / nx
            prune_metric = Metric.L2
        else:
            qp = x
            prune_metric = metric

        centers, radii = self._centers, self._radii
        left, right = self._left, self._right
        start, end, order = self._start, self._end, self._order
        points, payload = self.points, self.payload

        def lower_bound(node: int) -> float:
            e = point_to_center(node)
            e = e - radii[node]
            if e <= 0.0:
                return 0.0
            if metric is Metric.COSINE:
                return e * e / 2.0
            return e

        def point_to_center(node: int) -> float:
            c = centers[node]
            if prune_metric is Metric.L1:
                return float(np.sum(np.abs(qp - c)))
            return float(np.sqrt(np.sum((qp - c) ** 2)))

        # min-heap of (-distance, -payload): the root is the current worst
        # neighbor under the (distance, payload) order, ready to be displaced.
        best: list[tuple[float, int]] = []
        stack = [(lower_bound(0), 0)]
        while stack:
            lb, node = stack.pop()
            if len(best) == k and lb > -best[0][0]:
                continue
            if left[node] < 0:
                idx = order[start[node]:end[node]]
                dists = distances_to_point(metric, points[idx], x)
                for d, p in zip(dists, payload[idx]):
                    entry = (-float(d), -int(p))
                    if len(best) < k:
                        heapq.heappush(best, entry)
                    elif entry > best[0]:
                        heapq.heapreplace(best, entry)
            else:
                lchild, rchild = left[node], right[node]
                lb_l, lb_r = lower_bound(lchild), lower_bound(rchild)
                # push the farther child first so the nearer is explored next
                if lb_l <= lb_r:
                    stack.append((lb_r, rchild))
                    stack.append((lb_l, lchild))
                else:
                    stack.append((lb_l, lchild))
                    stack.append((lb_r, rchild))

        ordered = sorted(best, reverse=True)  # ascending (distance, payload)
        return [(-neg_p, -neg_d) for neg_d, neg_p in ordered]

    def query_distances(self, x: np.ndarray, k: int) -> np.ndarray:
        """Distances of the k nearest neighbors, ascending."""
        return np.array([d for _, d in self.query(x, k)])

    def query_payloads(self, x: np.ndarray, k: int) -> np.ndarray:
        """Payloads of the k nearest neighbors, ascending by distance."""
        return np.array([p for p, _ in self.query(x, k)], dtype=np.int64)
