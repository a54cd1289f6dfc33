"""Cosine trial scoring, equal error rate and normalized minimum DCF."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class TrialSet:
    scores: np.ndarray
    is_target: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_target = np.asarray(self.is_target, dtype=bool)
        if self.scores.shape != self.is_target.shape or self.scores.ndim != 1:
            raise ContractError("scores and labels must be equal-length 1-D arrays")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != self.scores.shape or np.any(self.weights < 0):
                raise ContractError("weights must be non-negative, one per trial")
        if not np.all(np.isfinite(self.scores)):
            raise ContractError("trial scores must be finite")

    @property
    def n_target(self) -> int:
        return int(self.is_target.sum())

    @property
    def n_nontarget(self) -> int:
        return int((~self.is_target).sum())


@dataclass(frozen=True)
class DcfParams:
    c_fr: float = 10.0
    c_fa: float = 1.0
    p_target: float = 0.01

    def __post_init__(self):
        if self.c_fr <= 0 or self.c_fa <= 0:
            raise ContractError("detection costs must be positive")
        if not 0.0 < self.p_target < 1.0:
            raise ContractError("p_target must lie in (0, 1)")

    @property
    def normalizer(self) -> float:
        return min(self.c_fr * self.p_target, self.c_fa * (1.0 - self.p_target))


def _rate_table(trials: TrialSet):
    """Distinct scores and FRR/FAR with the threshold just below each of them.

    Returns ``(unique_scores, frr, far)`` where ``frr[k]``/``far[k]`` hold for
    any threshold in ``(u[k-1], u[k]]`` and index ``n`` is reject-all.
    Accept means ``score >= threshold``.
    """
    w = trials.weights if trials.weights is not None else np.ones(trials.scores.shape)
    tw = np.where(trials.is_target, w, 0.0)
    nw = np.where(trials.is_target, 0.0, w)
    t_total, n_total = tw.sum(), nw.sum()
    if t_total <= 0 or n_total <= 0:
        raise ContractError("need at least one target and one nontarget trial")
    uniq, inv = np.unique(trials.scores, return_inverse=True)
    tc = np.bincount(inv, weights=tw, minlength=uniq.size)
    nc = np.bincount(inv, weights=nw, minlength=uniq.size)
    frr = np.concatenate([[0.0], np.cumsum(tc)]) / t_total
    far_below = np.concatenate([[0.0], np.cumsum(nc)])
    far = (n_total - far_below) / n_total
    frr[-1], far[-1] = 1.0, 0.0
    return uniq, frr, far


def eer(trials: TrialSet) -> tuple[float, float]:
    """Equal error rate (as a fraction) and the threshold where it occurs.

    Rates are swept over thresholds at midpoints between adjacent distinct
    scores (plus both infinities); the crossing of FRR and FAR is linearly
    interpolated between the two sweep points that bracket it.
    """
    uniq, frr, far = _rate_table(trials)
    d = frr - far
    k = int(np.argmax(d >= 0.0))
    thresholds = np.concatenate([[uniq[0]], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1]]])
    if d[k] == 0.0:
        return float(frr[k]), float(thresholds[k])
    t = -d[k - 1] / (d[k] - d[k - 1])
    value = frr[k - 1] + t * (frr[k] - frr[k - 1])
    thr = thresholds[k - 1] + t * (thresholds[k] - thresholds[k - 1])
    return float(value), float(thr)


def min_dcf(trials: TrialSet, params: DcfParams = DcfParams()) -> tuple[float, float]:
    """Minimum normalized detection cost over every distinct-score threshold and +inf."""
    uniq, frr, far = _rate_table(trials)
    dcf = (params.c_fr * params.p_target * frr
           + params.c_fa * (1.0 - params.p_target) * far) / params.normalizer
    k = int(np.argmin(dcf))
    thr = float(uniq[k]) if k < uniq.size else float("inf")
    return float(dcf[k]), thr


def score_trials(embeddings: np.ndarray, trials) -> TrialSet:
    """Cosine score for each ``(enroll, test, is_target)`` row of ``trials``.

    ``embeddings`` are unit rows, one per utterance of the evaluation set.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    tr = np.asarray(trials)
    if tr.ndim != 2 or tr.shape[1] != 3:
        raise ContractError("trials must be (enroll, test, is_target) rows")
    enroll = tr[:, 0].astype(np.int64)
    test = tr[:, 1].astype(np.int64)
    n = emb.shape[0]
    bad = (enroll < 0) | (enroll >= n) | (test < 0) | (test >= n)
    if np.any(bad):
        raise ContractError(f"trial {int(np.flatnonzero(bad)[0])} references a missing utterance")
    scores = np.clip(np.einsum("ij,ij->i", emb[enroll], emb[test]), -1.0, 1.0)
    return TrialSet(scores, tr[:, 2].astype(bool))


def evaluate_model(model, features: np.ndarray, trials, params: DcfParams = DcfParams()) -> dict:
    ts = score_trials(model.embed(features), trials)
    e, e_thr = eer(ts)
    d, d_thr = min_dcf(ts, params)
    return {"eer": e, "eer_threshold": e_thr, "min_dcf": d, "min_dcf_threshold": d_thr,
            "n_target": ts.n_target, "n_nontarget": ts.n_nontarget}
