"""Hybrid memory: source class prototypes plus target instance embeddings.

Both halves are updated by momentum rules, never by gradients. Cluster
prototypes for the target half are derived on demand from the current
instance embeddings and a pseudo-label assignment.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .errors import ContractError, ShapeError
from .linalg import l2_normalize_rows


@dataclass
class ClusterPrototypes:
    prototypes: np.ndarray   # (n_clusters, D), unit rows
    assignment: np.ndarray   # (n_t,) cluster index per target instance

    @property
    def n_clusters(self) -> int:
        return self.prototypes.shape[0]


class HybridMemory:
    def __init__(self, source_prototypes, target_instances, m_s: float = 0.2,
                 m_t: float = 0.2, renormalize: bool = True):
        self.source = np.array(source_prototypes, dtype=np.float64)
        self.target = np.array(target_instances, dtype=np.float64)
        if self.source.ndim != 2 or self.target.ndim != 2:
            raise ShapeError("memory halves must be 2-D arrays")
        if self.target.shape[0] and self.source.shape[1] != self.target.shape[1]:
            raise ShapeError("source and target embeddings differ in dimension")
        for name, m in (("m_s", m_s), ("m_t", m_t)):
            if not 0.0 <= m <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {m}")
        self.m_s = float(m_s)
        self.m_t = float(m_t)
        self.renormalize = renormalize

    @classmethod
    def initialize(cls, source_embeddings, source_labels, target_embeddings,
                   n_classes: int | None = None, **kwargs) -> "HybridMemory":
        """Class-mean source prototypes and a copy of every target embedding."""
        src = np.asarray(source_embeddings, dtype=np.float64)
        labels = np.asarray(source_labels)
        tgt = np.asarray(target_embeddings, dtype=np.float64)
        if tgt.ndim == 1:
            tgt = tgt.reshape(0, src.shape[1]) if tgt.size == 0 else tgt[None, :]
        if src.ndim != 2 or labels.shape != (src.shape[0],):
            raise ShapeError("need one label per source embedding")
        if tgt.shape[0] and tgt.shape[1] != src.shape[1]:
            raise ShapeError("source and target embeddings differ in dimension")
        k = int(labels.max()) + 1 if n_classes is None else int(n_classes)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ContractError(f"source labels must lie in [0, {k})")
        counts = np.bincount(labels, minlength=k)
        if np.any(counts == 0):
            empty = np.flatnonzero(counts == 0)
            raise ContractError(f"source classes without embeddings: {empty.tolist()}")
        sums = np.zeros((k, src.shape[1]))
        np.add.at(sums, labels, src)
        protos = l2_normalize_rows(sums / counts[:, None])
        return cls(protos, tgt.copy(), **kwargs)

    @property
    def n_source(self) -> int:
        return self.source.shape[0]

    @property
    def n_target(self) -> int:
        return self.target.shape[0]

    @property
    def dim(self) -> int:
        return self.source.shape[1]

    def _blend(self, old: np.ndarray, new: np.ndarray, m: float) -> np.ndarray:
        if m == 1.0:
            return old  # exact no-op; renormalizing would drift by an ulp
        v = m * old + (1.0 - m) * new
        if self.renormalize:
            v = l2_normalize_rows(v[None, :])[0]
        return v

    def update_source_prototype(self, k: int, batch_embeddings) -> np.ndarray:
        """Momentum step toward the mean of this batch's class-``k`` embeddings."""
        if not 0 <= k < self.n_source:
            raise ContractError(f"class index {k} out of range")
        fk = np.asarray(batch_embeddings, dtype=np.float64).reshape(-1, self.dim)
        if fk.shape[0] == 0:
            return self.source[k]
        self.source[k] = self._blend(self.source[k], fk.mean(axis=0), self.m_s)
        return self.source[k]

    def update_target_instance(self, i: int, f_t) -> np.ndarray:
        if not 0 <= i < self.n_target:
            raise ContractError(f"instance index {i} out of range [0, {self.n_target})")
        f = np.asarray(f_t, dtype=np.float64)
        if f.shape != (self.dim,):
            raise ShapeError(f"embedding shape {f.shape} != ({self.dim},)")
        self.target[i] = self._blend(self.target[i], f, self.m_t)
        return self.target[i]

    def update_from_batch(self, source_embeddings, source_labels,
                          target_embeddings, target_indices) -> None:
        """Source-class updates (ascending class order), then per-instance target updates."""
        src = np.asarray(source_embeddings, dtype=np.float64).reshape(-1, self.dim)
        labels = np.asarray(source_labels)
        for k in np.unique(labels):
            self.update_source_prototype(int(k), src[labels == k])
        tgt = np.asarray(target_embeddings, dtype=np.float64).reshape(-1, self.dim)
        for i, f in zip(np.asarray(target_indices), tgt):
            self.update_target_instance(int(i), f)

    def cluster_prototypes(self, assignment) -> ClusterPrototypes:
        return compute_cluster_prototypes(self, assignment)

    def copy(self) -> "HybridMemory":
        return HybridMemory(self.source, self.target, self.m_s, self.m_t, self.renormalize)

    def save(self, path, seed: int | None = None, meta: dict | None = None) -> None:
        info = {"m_s": self.m_s, "m_t": self.m_t, "renormalize": self.renormalize}
        info.update(meta or {})
        checkpoint.save(path, "memory", {"source": self.source, "target": self.target},
                        seed=seed, meta=info)

    @classmethod
    def load(cls, path) -> "HybridMemory":
        header, arrays = checkpoint.load(path, expect_kind="memory")
        m = header["meta"]
        return cls(arrays["source"], arrays["target"], m["m_s"], m["m_t"], m["renormalize"])


def compute_cluster_prototypes(memory: HybridMemory, assignment) -> ClusterPrototypes:
    """Normalized mean of the current instance embeddings in each cluster."""
    a = np.asarray(assignment)
    if a.shape != (memory.n_target,):
        raise ContractError(f"assignment must cover all {memory.n_target} target instances")
    if a.size == 0:
        return ClusterPrototypes(np.zeros((0, memory.dim)), a.astype(np.int64))
    if not np.issubdtype(a.dtype, np.integer) or a.min() < 0:
        raise ContractError("cluster indices must be non-negative integers")
    n = int(a.max()) + 1
    counts = np.bincount(a, minlength=n)
    if np.any(counts == 0):
        raise ContractError(f"empty clusters in assignment: {np.flatnonzero(counts == 0).tolist()}")
    sums = np.zeros((n, memory.dim))
    np.add.at(sums, a, memory.target)
    protos = l2_normalize_rows(sums / counts[:, None])
    # clusters of identical vectors reproduce that vector exactly
    _, firsts = np.unique(a, return_index=True)
    rep = memory.target[firsts]
    same = np.ones(n, dtype=bool)
    np.logical_and.at(same, a, np.all(memory.target == rep[a], axis=1))
    unit = np.abs(np.linalg.norm(rep, axis=1) - 1.0) < 1e-12
    protos[same & unit] = rep[same & unit]
    return ClusterPrototypes(protos, a.astype(np.int64))
