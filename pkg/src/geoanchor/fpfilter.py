"""Density-based rejection of false-positive retrievals."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import GeoPoint
from .retrieval import RetrievalResult

NOISE = -1
DEFAULT_MIN_PTS = 2


def default_eps(spacing: float) -> float:
    return 1.5 * spacing


@dataclass(frozen=True)
class ClusterLabeling:
    labels: tuple[int, ...]
    largest_cluster_indices: tuple[int, ...]

    @property
    def n_clusters(self) -> int:
        return max(self.labels, default=NOISE) + 1

    def members(self, cluster: int) -> list[int]:
        return [i for i, lab in enumerate(self.labels) if lab == cluster]

    def to_json(self) -> str:
        return json.dumps({"labels": list(self.labels), "largest": list(self.largest_cluster_indices)})


def _as_xy(points) -> np.ndarray:
    if len(points) and isinstance(points[0], GeoPoint):
        return np.array([p.as_array() for p in points])
    return np.asarray(points, dtype=float).reshape(-1, 2)


def dbscan(points: Sequence[GeoPoint] | np.ndarray, eps: float, min_pts: int = DEFAULT_MIN_PTS) -> ClusterLabeling:
    """Classic DBSCAN; neighbourhoods include the point itself.

    Points are visited in input order and a border point belongs to the
    first cluster that reaches it. The largest cluster is reported by size,
    lower cluster id on ties.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    xy = _as_xy(points)
    n = len(xy)
    if n == 0:
        return ClusterLabeling((), ())
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    neighbors = [np.nonzero(row <= eps)[0] for row in d]
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    labels = np.full(n, NOISE)
    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            if not core[j]:
                continue
            for nb in neighbors[j]:
                if labels[nb] == NOISE:
                    labels[nb] = cluster
                    queue.append(nb)
        cluster += 1
    largest = ()
    if cluster:
        sizes = np.bincount(labels[labels >= 0], minlength=cluster)
        best = int(np.argmax(sizes))
        largest = tuple(int(i) for i in np.nonzero(labels == best)[0])
    return ClusterLabeling(tuple(int(v) for v in labels), largest)


def select_cluster(labeling: ClusterLabeling, weights: np.ndarray) -> int | None:
    """Largest cluster, then higher summed weight, then lower id."""
    if labeling.n_clusters == 0:
        return None
    labels = np.array(labeling.labels)
    best, best_key = None, None
    for c in range(labeling.n_clusters):
        m = labels == c
        key = (int(m.sum()), float(np.sum(weights[m])))
        if best_key is None or key > best_key:
            best, best_key = c, key
    return best


def robust_observation(
    result: RetrievalResult, eps: float, min_pts: int = DEFAULT_MIN_PTS
) -> GeoPoint | None:
    """Centroid of the dominant cluster of match positions, or None if all are noise."""
    if len(result) == 0:
        raise ValueError("empty retrieval result")
    xy = result.positions()
    labeling = dbscan(xy, eps, min_pts)
    c = select_cluster(labeling, result.similarities())
    if c is None:
        return None
    members = np.array(labeling.labels) == c
    return GeoPoint.from_array(xy[members].mean(axis=0))


def mean_observation(result: RetrievalResult) -> GeoPoint:
    """Unfiltered observation: mean of all match positions."""
    return GeoPoint.from_array(result.positions().mean(axis=0))
