"""Flat ``section.key=value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys are
rejected, and every value is parsed to the type of its default.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .clustering import DbscanParams
from .data import AugmentConfig, WorldSpec
from .errors import ConfigError
from .losses import LossConfig
from .metrics import DcfParams
from .trainer import ABLATION_CELLS, TrainConfig

REQUIRED = ("paths.out",)

_TRAIN = TrainConfig()
_LOSS = LossConfig()
_CLUSTER = DbscanParams()
_AUG = AugmentConfig()
_DCF = DcfParams()

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "paths.out": "",
    "report.timing": False,
    # model
    "model.hidden": _TRAIN.hidden,
    "model.n_hidden_layers": _TRAIN.n_hidden_layers,
    "model.embedding_dim": _TRAIN.embedding_dim,
    # schedule
    "train.pretrain_epochs": _TRAIN.pretrain_epochs,
    "train.adapt_epochs": _TRAIN.adapt_epochs,
    "batch.source": _TRAIN.batch_source,
    "batch.target": _TRAIN.batch_target,
    "optim.pretrain_lr0": _TRAIN.pretrain_lr0,
    "optim.pretrain_lr1": _TRAIN.pretrain_lr1,
    "optim.adapt_lr0": _TRAIN.adapt_lr0,
    "optim.adapt_lr1": _TRAIN.adapt_lr1,
    "optim.momentum": _TRAIN.momentum,
    "aam.scale": _TRAIN.aam_scale,
    "aam.margin": _TRAIN.aam_margin,
    "aam.reinit_head": _TRAIN.reinit_head,
    "memory.m_s": _TRAIN.m_s,
    "memory.m_t": _TRAIN.m_t,
    "memory.renormalize": _TRAIN.renormalize_memory,
    "cluster.eps": _CLUSTER.eps,
    "cluster.min_pts": _CLUSTER.min_pts,
    "cluster.source": _TRAIN.cluster_source,
    "loss.tau": _LOSS.tau,
    "loss.lambda": _LOSS.lam,
    "loss.instance_on_source": _LOSS.instance_on_source,
    "augment.sigma": _AUG.sigma,
    "augment.scale_jitter": _AUG.scale_jitter,
    "augment.p_drop": _AUG.p_drop,
    "dcf.c_fr": _DCF.c_fr,
    "dcf.c_fa": _DCF.c_fa,
    "dcf.p_target": _DCF.p_target,
    "sweep.cells": ",".join(f"{m}:{lam}" for m, lam in ABLATION_CELLS),
}
for _f in fields(WorldSpec):
    DEFAULTS[f"world.{_f.name}"] = _f.default


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_text(text: str, origin: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{origin}:{n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{origin}:{n}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


class RunConfig:
    """Merged configuration: defaults, then file values, then CLI overrides."""

    def __init__(self, values: dict[str, object] | None = None):
        merged = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown key {k!r}")
            merged[k] = v if not isinstance(v, str) or isinstance(DEFAULTS[k], str) \
                else _parse_value(k, v)
        self.values = merged
        self.validate()

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        values = parse_text(p.read_text(), str(p))
        values.update(overrides or {})
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        for key in REQUIRED:
            if not self.values[key]:
                raise ConfigError(f"missing required key: {key}")
        if self.values["cluster.source"] not in ("memory", "reextract"):
            raise ConfigError("cluster.source must be 'memory' or 'reextract'")
        # build every sub-config once so their own checks run up front
        self.world_spec().validate()
        self.train_config()
        self.dcf_params()
        self.sweep_cells()

    def world_spec(self) -> WorldSpec:
        return WorldSpec(**{f.name: self.values[f"world.{f.name}"] for f in fields(WorldSpec)})

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            seed=v["seed"], hidden=v["model.hidden"], n_hidden_layers=v["model.n_hidden_layers"],
            embedding_dim=v["model.embedding_dim"],
            pretrain_epochs=v["train.pretrain_epochs"], adapt_epochs=v["train.adapt_epochs"],
            batch_source=v["batch.source"], batch_target=v["batch.target"],
            pretrain_lr0=v["optim.pretrain_lr0"], pretrain_lr1=v["optim.pretrain_lr1"],
            adapt_lr0=v["optim.adapt_lr0"], adapt_lr1=v["optim.adapt_lr1"],
            momentum=v["optim.momentum"], aam_scale=v["aam.scale"], aam_margin=v["aam.margin"],
            reinit_head=v["aam.reinit_head"], m_s=v["memory.m_s"], m_t=v["memory.m_t"],
            renormalize_memory=v["memory.renormalize"],
            cluster=DbscanParams(v["cluster.eps"], v["cluster.min_pts"]),
            cluster_source=v["cluster.source"],
            loss=LossConfig(v["loss.tau"], v["loss.lambda"], v["loss.instance_on_source"]),
            augment=AugmentConfig(v["augment.sigma"], v["augment.scale_jitter"], v["augment.p_drop"]),
        )

    def dcf_params(self) -> DcfParams:
        return DcfParams(self.values["dcf.c_fr"], self.values["dcf.c_fa"], self.values["dcf.p_target"])

    def sweep_cells(self) -> list[tuple[float, float]]:
        cells = []
        for item in str(self.values["sweep.cells"]).split(","):
            item = item.strip()
            if not item:
                continue
            try:
                m, lam = (float(x) for x in item.split(":"))
            except ValueError:
                raise ConfigError(f"sweep.cells: expected m:lambda pairs, got {item!r}") from None
            cells.append((m, lam))
        if not cells:
            raise ConfigError("sweep.cells is empty")
        return cells

    def effective_lines(self) -> list[str]:
        return [f"{k}={_fmt(self.values[k])}" for k in sorted(self.values)]

    def as_dict(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)
