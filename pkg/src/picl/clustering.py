"""DBSCAN pseudo-labelling of target instance embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import ContractError
from .memory import ClusterPrototypes, HybridMemory, compute_cluster_prototypes

NOISE = -1


@dataclass(frozen=True)
class DbscanParams:
    eps: float = 0.005
    min_pts: int = 4
    metric: str = "cosine"  # "cosine" (1 - cos) or "euclidean"

    def __post_init__(self):
        if not 0.0 < self.eps <= 2.0 and self.metric == "cosine":
            raise ContractError(f"cosine eps must lie in (0, 2], got {self.eps}")
        if self.eps <= 0.0:
            raise ContractError("eps must be positive")
        if self.min_pts < 1:
            raise ContractError("min_pts must be >= 1")
        if self.metric not in ("cosine", "euclidean"):
            raise ContractError(f"unknown metric {self.metric!r}")


@dataclass
class DbscanResult:
    labels: np.ndarray   # raw labels, NOISE for noise points
    core: np.ndarray     # bool mask of core points

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def n_noise(self) -> int:
        return int(np.sum(self.labels == NOISE))


@dataclass
class PseudoLabels:
    labels: np.ndarray
    n_clusters: int
    n_outliers_promoted: int


def dbscan(points, params: DbscanParams = DbscanParams(), kernels=None) -> DbscanResult:
    """Density-based clustering in input index order.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Clusters grow breadth-first from the lowest-index
    unlabelled core point; a border point keeps the first cluster that
    reaches it.
    """
    x = np.ascontiguousarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ContractError("dbscan needs at least one point")
    k = kernels if kernels is not None else _backend.kernels
    labels, core = k.dbscan_labels(x, float(params.eps), int(params.min_pts),
                                   params.metric == "cosine")
    return DbscanResult(np.asarray(labels, dtype=np.int64), np.asarray(core, dtype=bool))


def promote_outliers(raw_labels) -> PseudoLabels:
    """Give every noise point its own cluster and compact indices to 0..n-1.

    Existing clusters keep their relative order; singletons follow in
    input order.
    """
    raw = np.asarray(raw_labels.labels if isinstance(raw_labels, DbscanResult) else raw_labels,
                     dtype=np.int64)
    out = np.empty_like(raw)
    kept = np.unique(raw[raw != NOISE])
    remap = {int(c): i for i, c in enumerate(kept)}
    noise = raw == NOISE
    out[~noise] = [remap[int(c)] for c in raw[~noise]]
    n_noise = int(noise.sum())
    out[noise] = np.arange(len(kept), len(kept) + n_noise)
    return PseudoLabels(out, len(kept) + n_noise, n_noise)


def cluster_target(memory: HybridMemory, params: DbscanParams = DbscanParams(),
                   embeddings=None) -> tuple[PseudoLabels, ClusterPrototypes]:
    """Cluster the memory's instance embeddings (or ``embeddings`` when given)."""
    points = memory.target if embeddings is None else np.asarray(embeddings, dtype=np.float64)
    pseudo = promote_outliers(dbscan(points, params))
    return pseudo, compute_cluster_prototypes(memory, pseudo.labels)
