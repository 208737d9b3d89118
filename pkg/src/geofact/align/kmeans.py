"""Seeded k-means++ clustering, written out in full for determinism.

The cluster-level beta policy groups samples by their diagnostic features;
keeping the implementation self-contained pins the exact assignment for a
given seed across library versions.
"""

from __future__ import annotations

import numpy as np

from ..errors import GeofactError


class ClusteringError(GeofactError):
    pass


def kmeans_pp(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cluster points into k groups; returns (centers, labels).

    Initialization follows the k-means++ scheme (first center uniform, the
    rest sampled proportionally to the squared distance from the nearest
    chosen center), then standard Lloyd iterations until the assignment is
    stable. Deterministic for a fixed seed; ties resolve to the lowest index.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ClusteringError(f"points must be 2-D, got shape {points.shape}")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ClusteringError(f"need 1 <= k <= {n}, got k={k}")

    rng = np.random.default_rng(seed)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    min_sq = np.full(n, np.inf)
    for j in range(1, k):
        dist_sq = ((points - centers[j - 1]) ** 2).sum(axis=1)
        min_sq = np.minimum(min_sq, dist_sq)
        total = min_sq.sum()
        if total == 0.0:
            centers[j] = points[rng.integers(n)]
            continue
        centers[j] = points[rng.choice(n, p=min_sq / total)]

    labels: np.ndarray | None = None
    for _ in range(max_iter):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        if labels is not None and (new_labels == labels).all():
            break  # assignment stable; centers are already the member means
        labels = new_labels
        for cluster in range(k):
            members = labels == cluster
            if members.any():
                centers[cluster] = points[members].mean(axis=0)
    # the assignment always reflects the returned centers, even on a
    # max_iter exit where the last update moved them
    dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return centers, dists.argmin(axis=1)
