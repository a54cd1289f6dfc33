"""Prototype contrastive, instance contrastive and combined objectives.

Gradients are taken with respect to the unit embeddings only; memory
prototypes are constants here (they move by momentum, not by backprop),
and the normalization Jacobian is applied later by the encoder.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import AAMHead, aam_loss
from .errors import ContractError, ShapeError
from .memory import ClusterPrototypes, HybridMemory

SOURCE = "source"
TARGET = "target"


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.05
    lam: float = 5.0
    instance_on_source: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")


@dataclass(frozen=True)
class PositiveRef:
    kind: str   # SOURCE (class prototype) or TARGET (cluster prototype)
    index: int


def _all_prototypes(memory: HybridMemory, clusters: ClusterPrototypes | None) -> np.ndarray:
    parts = [memory.source]
    if clusters is not None and clusters.n_clusters:
        parts.append(clusters.prototypes)
    protos = np.concatenate(parts, axis=0)
    if protos.shape[0] == 0:
        raise ContractError("no prototypes to contrast against")
    return protos


def _positive_rows(kinds, indices, memory, clusters) -> np.ndarray:
    n_s = memory.n_source
    n_c = clusters.n_clusters if clusters is not None else 0
    rows = np.empty(len(indices), dtype=np.int64)
    for j, (kind, idx) in enumerate(zip(kinds, indices)):
        idx = int(idx)
        if kind == SOURCE:
            if not 0 <= idx < n_s:
                raise ContractError(f"dangling source prototype reference {idx}")
            rows[j] = idx
        elif kind == TARGET:
            if not 0 <= idx < n_c:
                raise ContractError(f"dangling cluster prototype reference {idx}")
            rows[j] = n_s + idx
        else:
            raise ContractError(f"unknown prototype kind {kind!r}")
    return rows


def prototype_loss_batch(f, positive_rows, prototypes, tau: float):
    """Per-row softmax cross-entropy over ``<f, z> / tau``.

    Returns ``(losses (B,), grad (B, D))`` where each row's gradient is for
    its own loss term (no batch averaging).
    """
    f = np.asarray(f, dtype=np.float64)
    rows = np.arange(f.shape[0])
    logits = (f @ prototypes.T) / tau
    diff = logits - logits[rows, positive_rows][:, None]
    diff[rows, positive_rows] = -np.inf
    shift = np.maximum(diff.max(axis=1), 0.0)
    ex = np.exp(diff - shift[:, None])
    rest = ex.sum(axis=1)
    losses = np.where(shift > 0.0, shift + np.log(np.exp(-shift) + rest), np.log1p(rest))
    ex[rows, positive_rows] = np.exp(-shift)
    probs = ex / ex.sum(axis=1, keepdims=True)
    probs[rows, positive_rows] -= 1.0
    grad = (probs @ prototypes) / tau
    return losses, grad


def prototype_loss(f, positive: PositiveRef, memory: HybridMemory,
                   clusters: ClusterPrototypes | None, cfg: LossConfig = LossConfig()):
    """Contrast one unit embedding against every source and cluster prototype."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (memory.dim,):
        raise ShapeError(f"embedding shape {f.shape} != ({memory.dim},)")
    protos = _all_prototypes(memory, clusters)
    row = _positive_rows([positive.kind], [positive.index], memory, clusters)
    losses, grad = prototype_loss_batch(f[None, :], row, protos, cfg.tau)
    return float(losses[0]), grad[0]


def instance_loss(f, f_prime):
    """``1 - <f, f'>`` with gradients ``-f'`` and ``-f``."""
    f = np.asarray(f, dtype=np.float64)
    fp = np.asarray(f_prime, dtype=np.float64)
    if f.shape != fp.shape:
        raise ShapeError("views differ in shape")
    loss = 1.0 - np.sum(f * fp, axis=-1)
    if loss.ndim == 0:
        loss = float(loss)
    return loss, -fp, -f


@dataclass
class BatchOutputs:
    """Unit embeddings of one mixed batch plus everything needed to score them."""

    source: np.ndarray               # (B_s, D)
    source_labels: np.ndarray        # (B_s,)
    target: np.ndarray               # (B_t, D)
    target_pseudo: np.ndarray | None  # (B_t,) cluster index per target item
    target_views: np.ndarray | None  # (B_t, D)
    source_views: np.ndarray | None = None


@dataclass
class LossResult:
    total: float
    l_s: float
    l_p: float
    l_i: float
    grad_source: np.ndarray
    grad_target: np.ndarray
    grad_target_views: np.ndarray | None
    grad_source_views: np.ndarray | None
    grad_head: np.ndarray
    extras: dict = field(default_factory=dict)


def combined_loss(batch: BatchOutputs, head: AAMHead, memory: HybridMemory | None,
                  clusters: ClusterPrototypes | None, cfg: LossConfig = LossConfig()) -> LossResult:
    """``L_s + L_p + lam * L_i`` over one batch, each term batch-averaged.

    ``L_s`` averages over source items, ``L_p`` over every item of both
    domains, ``L_i`` over view pairs (target items, plus source items when
    ``cfg.instance_on_source``). With no memory the prototype and instance
    terms vanish, which is the pretraining objective.
    """
    d = head.weight.shape[1]
    src = np.asarray(batch.source, dtype=np.float64).reshape(-1, d)
    tgt = np.asarray(batch.target, dtype=np.float64).reshape(-1, d)
    b_s, b_t = src.shape[0], tgt.shape[0]
    grad_src = np.zeros((b_s, d))
    grad_tgt = np.zeros((b_t, d))
    grad_head = np.zeros_like(head.weight)

    l_s = 0.0
    if b_s:
        l_s, g, grad_head = aam_loss(head, src, np.asarray(batch.source_labels))
        grad_src += g

    l_p = 0.0
    if memory is not None and b_s + b_t:
        if b_t and batch.target_pseudo is None:
            raise ContractError("target items need pseudo labels")
        protos = _all_prototypes(memory, clusters)
        kinds = [SOURCE] * b_s + [TARGET] * b_t
        idx = list(np.asarray(batch.source_labels).tolist()) + (
            list(np.asarray(batch.target_pseudo).tolist()) if b_t else [])
        rows = _positive_rows(kinds, idx, memory, clusters)
        losses, g = prototype_loss_batch(np.concatenate([src, tgt]), rows, protos, cfg.tau)
        n = b_s + b_t
        l_p = float(losses.mean())
        grad_src += g[:b_s] / n
        grad_tgt += g[b_s:] / n

    l_i = 0.0
    g_tv = g_sv = None
    if memory is not None:
        pairs = []
        if b_t:
            if batch.target_views is None:
                raise ContractError("target items need an augmented view")
            pairs.append(("target", tgt, np.asarray(batch.target_views, dtype=np.float64)))
        if cfg.instance_on_source and b_s:
            if batch.source_views is None:
                raise ContractError("instance_on_source requires source views")
            pairs.append(("source", src, np.asarray(batch.source_views, dtype=np.float64)))
        n_pairs = sum(p[1].shape[0] for p in pairs)
        for name, a, v in pairs:
            li, ga, gv = instance_loss(a, v)
            l_i += float(np.sum(li)) / n_pairs
            scale = cfg.lam / n_pairs
            if name == "target":
                grad_tgt += scale * ga
                g_tv = scale * gv
            else:
                grad_src += scale * ga
                g_sv = scale * gv

    total = l_s + l_p + cfg.lam * l_i
    return LossResult(total, l_s, l_p, l_i, grad_src, grad_tgt, g_tv, g_sv, grad_head)
