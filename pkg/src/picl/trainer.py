"""Two-stage pipeline: AAM-softmax pretraining, then memory-driven adaptation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .clustering import DbscanParams, cluster_target
from .data import AugmentConfig, EpochSampler, SpeakerWorld, assemble_batch
from .encoder import AAMHead, EncoderModel, LRSchedule, SgdOptimizer, aam_loss, step
from .errors import DivergenceError
from .losses import BatchOutputs, LossConfig, combined_loss
from .memory import HybridMemory
from .metrics import DcfParams, evaluate_model

log = logging.getLogger(__name__)

# named sub-streams of the root seed
STREAM_WORLD, STREAM_INIT, STREAM_BATCH, STREAM_AUGMENT = 1, 2, 3, 4


def stream(seed: int, which: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), which, salt])


@dataclass
class TrainConfig:
    seed: int = 0
    hidden: int = 128
    n_hidden_layers: int = 2
    embedding_dim: int = 64
    pretrain_epochs: int = 30
    adapt_epochs: int = 20
    batch_source: int = 32
    batch_target: int = 32
    pretrain_lr0: float = 0.1
    pretrain_lr1: float = 1e-3
    adapt_lr0: float = 0.05
    adapt_lr1: float = 5e-4
    momentum: float = 0.9
    aam_scale: float = 32.0
    aam_margin: float = 0.2
    reinit_head: bool = False
    m_s: float = 0.5
    m_t: float = 0.5
    renormalize_memory: bool = True
    cluster: DbscanParams = field(default_factory=DbscanParams)
    cluster_source: str = "memory"
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def layer_sizes(self, input_dim: int) -> list[int]:
        return [input_dim] + [self.hidden] * self.n_hidden_layers + [self.embedding_dim]


@dataclass
class EpochReport:
    stage: str
    epoch: int
    l_s: float
    l_p: float
    l_i: float
    total: float
    n_clusters: int = 0
    n_outliers: int = 0
    purity: float = float("nan")
    margin: float = 0.0
    lr: float = 0.0
    wall_time: float = 0.0

    def to_record(self, timing: bool = False) -> dict:
        rec = asdict(self)
        if not timing:
            rec.pop("wall_time")
        return rec

    def to_json(self, timing: bool = False) -> str:
        return json.dumps(self.to_record(timing), sort_keys=True)


def _check_finite(value: float, what: str, stage: str, epoch: int, it: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"{stage} epoch {epoch} step {it}: {what} is {value}")


def margin_at(epoch: int, n_epochs: int, final: float) -> float:
    """Linear margin ramp from 0 at the first epoch to ``final`` at the last."""
    if n_epochs <= 1:
        return final
    return final * epoch / (n_epochs - 1)


def init_model(world: SpeakerWorld, cfg: TrainConfig) -> tuple[EncoderModel, AAMHead]:
    rng = stream(cfg.seed, STREAM_INIT)
    model = EncoderModel.init(cfg.layer_sizes(world.spec.dim), rng)
    head = AAMHead.init(world.spec.n_source_speakers, cfg.embedding_dim, rng,
                        scale=cfg.aam_scale, margin=0.0)
    return model, head


def pretrain(world: SpeakerWorld, cfg: TrainConfig, model: EncoderModel | None = None,
             head: AAMHead | None = None) -> tuple[EncoderModel, AAMHead, list[EpochReport]]:
    """Source-only training with the AAM margin ramped from 0 to ``cfg.aam_margin``."""
    if model is None or head is None:
        model, head = init_model(world, cfg)
    src = world.source_train
    sampler = EpochSampler(len(src), 0, cfg.batch_source, 0, stream(cfg.seed, STREAM_BATCH, 1))
    steps_per_epoch = -(-len(src) // cfg.batch_source)
    opt = SgdOptimizer(LRSchedule(cfg.pretrain_lr0, cfg.pretrain_lr1,
                                  cfg.pretrain_epochs * steps_per_epoch), cfg.momentum)
    reports = []
    t = 0
    for epoch in range(cfg.pretrain_epochs):
        start = time.perf_counter()
        head.margin = margin_at(epoch, cfg.pretrain_epochs, cfg.aam_margin)
        losses = []
        for idx in sampler.pretrain_epoch():
            f, tape = model.forward(src.features[idx])
            loss, g_f, g_w = aam_loss(head, f, src.speakers[idx])
            _check_finite(loss, "L_s", "pretrain", epoch, t)
            step(model, model.backward(tape, g_f), opt, t, head=head, head_grad=g_w)
            losses.append(loss)
            t += 1
        mean = float(np.mean(losses))
        reports.append(EpochReport("pretrain", epoch, mean, 0.0, 0.0, mean, margin=head.margin,
                                   lr=opt.schedule(t), wall_time=time.perf_counter() - start))
        log.info("pretrain epoch %d  L_s=%.4f  margin=%.3f", epoch, mean, head.margin)
    head.margin = cfg.aam_margin
    return model, head, reports


def cluster_purity(pseudo_labels: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of instances whose cluster's majority speaker matches their own."""
    hits = 0
    for c in np.unique(pseudo_labels):
        members = truth[pseudo_labels == c]
        hits += np.bincount(members).max()
    return hits / pseudo_labels.size


def init_memory(model: EncoderModel, world: SpeakerWorld, cfg: TrainConfig) -> HybridMemory:
    return HybridMemory.initialize(
        model.embed(world.source_train.features), world.source_train.speakers,
        model.embed(world.target_adapt.features), n_classes=world.spec.n_source_speakers,
        m_s=cfg.m_s, m_t=cfg.m_t, renormalize=cfg.renormalize_memory)


def adapt_step(model: EncoderModel, head: AAMHead, memory: HybridMemory, clusters,
               pseudo: np.ndarray, batch, opt: SgdOptimizer, t: int, cfg: TrainConfig):
    """forward -> loss -> backward -> SGD step -> memory updates (source, then target)."""
    parts = [batch.source_x, batch.target_x, batch.target_views]
    if batch.source_views is not None:
        parts.append(batch.source_views)
    f_all, tape = model.forward(np.concatenate(parts))
    b_s, b_t = batch.source_x.shape[0], batch.target_x.shape[0]
    f_s, f_t = f_all[:b_s], f_all[b_s:b_s + b_t]
    f_v = f_all[b_s + b_t:b_s + 2 * b_t]
    f_sv = f_all[b_s + 2 * b_t:] if batch.source_views is not None else None
    out = BatchOutputs(f_s, batch.source_y, f_t, pseudo[batch.target_idx], f_v, f_sv)
    res = combined_loss(out, head, memory, clusters, cfg.loss)
    grads = [res.grad_source, res.grad_target, res.grad_target_views]
    if f_sv is not None:
        grads.append(res.grad_source_views)
    step(model, model.backward(tape, np.concatenate(grads)), opt, t, head=head,
         head_grad=res.grad_head)
    memory.update_from_batch(f_s, batch.source_y, f_t, batch.target_idx)
    return res


def adapt(model: EncoderModel, head: AAMHead, world: SpeakerWorld, cfg: TrainConfig,
          memory: HybridMemory | None = None):
    """Iterative pseudo-label adaptation. Returns (model, head, memory, reports)."""
    if cfg.reinit_head:
        head = AAMHead.init(world.spec.n_source_speakers, cfg.embedding_dim,
                            stream(cfg.seed, STREAM_INIT, 1), cfg.aam_scale, cfg.aam_margin)
    head.margin = cfg.aam_margin
    if cfg.adapt_epochs <= 0:
        return model, head, memory, []
    if memory is None:
        memory = init_memory(model, world, cfg)
    src, tgt = world.source_train, world.target_adapt
    sampler = EpochSampler(len(src), len(tgt), cfg.batch_source, cfg.batch_target,
                           stream(cfg.seed, STREAM_BATCH, 2))
    aug_rng = stream(cfg.seed, STREAM_AUGMENT)
    steps_per_epoch = -(-len(tgt) // cfg.batch_target)
    opt = SgdOptimizer(LRSchedule(cfg.adapt_lr0, cfg.adapt_lr1,
                                  cfg.adapt_epochs * steps_per_epoch), cfg.momentum)
    reports = []
    t = 0
    for epoch in range(cfg.adapt_epochs):
        start = time.perf_counter()
        points = None if cfg.cluster_source == "memory" else model.embed(tgt.features)
        pseudo, clusters = cluster_target(memory, cfg.cluster, embeddings=points)
        if pseudo.n_clusters == 1:
            log.warning("adapt epoch %d: clustering collapsed to a single cluster", epoch)
        sums = np.zeros(4)
        batches = sampler.adapt_epoch()
        for s_idx, t_idx in batches:
            batch = assemble_batch(src, tgt, s_idx, t_idx, cfg.augment, aug_rng,
                                   source_views=cfg.loss.instance_on_source)
            res = adapt_step(model, head, memory, clusters, pseudo.labels, batch, opt, t, cfg)
            _check_finite(res.total, "total loss", "adapt", epoch, t)
            sums += (res.l_s, res.l_p, res.l_i, res.total)
            t += 1
        m = sums / len(batches)
        rep = EpochReport("adapt", epoch, *map(float, m), n_clusters=pseudo.n_clusters,
                          n_outliers=pseudo.n_outliers_promoted,
                          purity=float(cluster_purity(pseudo.labels, tgt.speakers)),
                          margin=head.margin, lr=opt.schedule(t),
                          wall_time=time.perf_counter() - start)
        reports.append(rep)
        log.info("adapt epoch %d  L=%.4f  clusters=%d  outliers=%d  purity=%.3f",
                 epoch, rep.total, rep.n_clusters, rep.n_outliers, rep.purity)
    return model, head, memory, reports


def evaluate(model: EncoderModel, world: SpeakerWorld, dcf: DcfParams = DcfParams()) -> dict:
    return {
        "source": evaluate_model(model, world.source_eval.features, world.source_trials, dcf),
        "target": evaluate_model(model, world.target_eval.features, world.target_trials, dcf),
    }


def grid_cells(momenta, lambdas) -> list[tuple[float, float]]:
    """Cartesian product of momentum and lambda values, momentum-major."""
    return [(float(m), float(lam)) for m in momenta for lam in lambdas]


# default (m, lambda) cells for sweeps
ABLATION_CELLS = [(0.2, 0.0), (0.5, 0.0), (0.8, 0.0), (0.5, 1.0), (0.5, 5.0), (0.5, 10.0)]


def sweep(world: SpeakerWorld, cfg: TrainConfig, model: EncoderModel, head: AAMHead,
          cells=ABLATION_CELLS, dcf: DcfParams = DcfParams()) -> list[dict]:
    """Adapt a fresh copy of the pretrained model for every (m, lambda) cell.

    Every cell uses ``cfg.seed`` so rows differ only in the swept values;
    ``m`` sets both memory momenta.
    """
    rows = []
    for m, lam in cells:
        cell = replace(cfg, m_s=float(m), m_t=float(m), loss=replace(cfg.loss, lam=float(lam)))
        h = AAMHead(head.weight.copy(), head.scale, head.margin)
        adapted, _, _, reps = adapt(model.copy(), h, world, cell)
        ev = evaluate(adapted, world, dcf)["target"]
        rows.append({"m": float(m), "lambda": float(lam), "eer": ev["eer"],
                     "min_dcf": ev["min_dcf"],
                     "final_clusters": reps[-1].n_clusters if reps else 0})
    return rows
