"""Pure-Python/numpy DBSCAN kernel, used when the compiled extension is absent."""
from __future__ import annotations

from collections import deque

import numpy as np


def pairwise_distances(points: np.ndarray, cosine: bool) -> np.ndarray:
    if cosine:
        return 1.0 - points @ points.T
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def dbscan_labels(points: np.ndarray, eps: float, min_pts: int, cosine: bool):
    """Return (labels, core_mask); noise is labelled -1."""
    n = points.shape[0]
    adj = pairwise_distances(points, cosine) <= eps
    np.fill_diagonal(adj, True)
    core = adj.sum(axis=1) >= min_pts
    neighbors = [np.flatnonzero(row) for row in adj]
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in neighbors[p]:
                if labels[q] == -1:
                    labels[q] = cluster
                    if core[q]:
                        queue.append(q)
        cluster += 1
    return labels, core
