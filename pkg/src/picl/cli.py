"""``picl`` command line: generate | pretrain | adapt | evaluate | sweep."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data
from .checkpoint import atomic_write_bytes
from .config import RunConfig
from .encoder import load_model, save_model
from .errors import DivergenceError, PiclError
from .metrics import score_trials
from .trainer import adapt, evaluate, pretrain, sweep

log = logging.getLogger("picl")

EXIT_USAGE = 2
EXIT_DIVERGED = 3


class MissingArtifact(PiclError):
    pass


class Layout:
    """Fixed file layout under the output directory."""

    def __init__(self, out: str | Path):
        self.root = Path(out)
        self.data = self.root / "data"
        self.reports = self.root / "reports"
        self.pretrain_ckpt = self.root / "pretrain.ckpt"
        self.adapt_ckpt = self.root / "adapt.ckpt"
        self.memory_ckpt = self.root / "memory.ckpt"

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise MissingArtifact(f"{path} not found; run `picl {hint}` first")
        return path


def _write_text(path: Path, lines: list[str]) -> None:
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _config_header(cfg: RunConfig) -> list[str]:
    return [f"# {line}" for line in cfg.effective_lines()]


def _load_world(layout: Layout) -> data.SpeakerWorld:
    layout.require(layout.data / "world.json", "generate")
    return data.load_world(layout.data)


def cmd_generate(cfg: RunConfig, layout: Layout) -> int:
    world = data.generate_world(cfg.world_spec(), cfg["seed"])
    paths = data.save_world(layout.data, world)
    print(f"source_train={len(world.source_train)} target_adapt={len(world.target_adapt)} "
          f"source_trials={len(world.source_trials)} target_trials={len(world.target_trials)}")
    print(f"wrote {len(paths)} files to {layout.data}")
    return 0


def _epoch_report(cfg: RunConfig, reports) -> list[str]:
    lines = [json.dumps({"config": cfg.as_dict()}, sort_keys=True)]
    lines += [r.to_json(timing=cfg["report.timing"]) for r in reports]
    return lines


def cmd_pretrain(cfg: RunConfig, layout: Layout) -> int:
    world = _load_world(layout)
    tc = cfg.train_config()
    model, head, reports = pretrain(world, tc)
    save_model(layout.pretrain_ckpt, model, head, seed=cfg["seed"], meta={"stage": "pretrain"})
    _write_text(layout.reports / "pretrain.jsonl", _epoch_report(cfg, reports))
    if reports:
        print(f"pretrain: {len(reports)} epochs, final L_s={reports[-1].l_s:.4f}")
    print(f"wrote {layout.pretrain_ckpt}")
    return 0


def cmd_adapt(cfg: RunConfig, layout: Layout) -> int:
    world = _load_world(layout)
    model, head, _ = load_model(layout.require(layout.pretrain_ckpt, "pretrain"))
    model, head, memory, reports = adapt(model, head, world, cfg.train_config())
    save_model(layout.adapt_ckpt, model, head, seed=cfg["seed"], meta={"stage": "adapt"})
    if memory is not None:
        memory.save(layout.memory_ckpt, seed=cfg["seed"])
    _write_text(layout.reports / "adapt.jsonl", _epoch_report(cfg, reports))
    for r in reports:
        print(f"epoch {r.epoch:3d}  L={r.total:.4f}  L_s={r.l_s:.4f}  L_p={r.l_p:.4f}  "
              f"L_i={r.l_i:.4f}  clusters={r.n_clusters}  purity={r.purity:.3f}")
    print(f"wrote {layout.adapt_ckpt}")
    return 0


def _resolve_models(which: str, layout: Layout) -> list[tuple[str, Path]]:
    if which == "pretrain":
        return [("pretrain", layout.require(layout.pretrain_ckpt, "pretrain"))]
    if which == "adapt":
        return [("adapt", layout.require(layout.adapt_ckpt, "adapt"))]
    if which == "all":
        found = [(n, p) for n, p in (("pretrain", layout.pretrain_ckpt), ("adapt", layout.adapt_ckpt))
                 if p.exists()]
        if not found:
            raise MissingArtifact(f"no checkpoints under {layout.root}; run `picl pretrain` first")
        return found
    p = Path(which)
    if not p.exists():
        raise MissingArtifact(f"checkpoint {p} not found")
    return [(p.stem, p)]


def cmd_evaluate(cfg: RunConfig, layout: Layout, which: str = "all") -> int:
    world = _load_world(layout)
    dcf = cfg.dcf_params()
    for name, path in _resolve_models(which, layout):
        model, _, _ = load_model(path)
        result = evaluate(model, world, dcf)
        lines = _config_header(cfg) + [f"# model={path.name}"]
        for domain in ("source", "target"):
            r = result[domain]
            lines += [f"{domain}.eer={r['eer']!r}", f"{domain}.min_dcf={r['min_dcf']!r}",
                      f"{domain}.n_target={r['n_target']}", f"{domain}.n_nontarget={r['n_nontarget']}"]
            split = world.source_eval if domain == "source" else world.target_eval
            trials = world.source_trials if domain == "source" else world.target_trials
            ts = score_trials(model.embed(split.features), trials)
            score_lines = ["enroll,test,score,label"] + [
                f"{int(e)},{int(t)},{s!r},{'target' if lab else 'nontarget'}"
                for (e, t, lab), s in zip(trials, ts.scores)]
            _write_text(layout.reports / f"scores_{name}_{domain}.csv", score_lines)
        table = [f"{'model':<10} {'domain':<8} {'EER(%)':>9} {'minDCF':>8}"]
        for domain in ("source", "target"):
            r = result[domain]
            table.append(f"{name:<10} {domain:<8} {100 * r['eer']:9.4f} {r['min_dcf']:8.4f}")
        lines += [f"# {row}" for row in table]
        _write_text(layout.reports / f"evaluate_{name}.txt", lines)
        print("\n".join(table))
    return 0


def cmd_sweep(cfg: RunConfig, layout: Layout) -> int:
    world = _load_world(layout)
    model, head, _ = load_model(layout.require(layout.pretrain_ckpt, "pretrain"))
    rows = sweep(world, cfg.train_config(), model, head, cfg.sweep_cells(), cfg.dcf_params())
    lines = _config_header(cfg) + ["m\tlambda\teer\tmin_dcf\tfinal_clusters"]
    lines += [f"{r['m']!r}\t{r['lambda']!r}\t{r['eer']!r}\t{r['min_dcf']!r}\t{r['final_clusters']}"
              for r in rows]
    _write_text(layout.reports / "sweep.tsv", lines)
    print(f"{'m':>5} {'lambda':>7} {'EER(%)':>9} {'minDCF':>8}")
    for r in rows:
        print(f"{r['m']:5.2f} {r['lambda']:7.2f} {100 * r['eer']:9.4f} {r['min_dcf']:8.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="picl", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None, help="override the root seed")
    common.add_argument("--out", default=None, help="override paths.out")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate", "pretrain", "adapt", "sweep"):
        sub.add_parser(name, parents=[common])
    ev = sub.add_parser("evaluate", parents=[common])
    ev.add_argument("--model", default="all",
                    help="pretrain | adapt | all (default) | path to a checkpoint")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["paths.out"] = args.out
    try:
        cfg = RunConfig.from_file(args.config, overrides)
        layout = Layout(cfg["paths.out"])
        if args.command == "evaluate":
            return cmd_evaluate(cfg, layout, args.model)
        return {"generate": cmd_generate, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
                "sweep": cmd_sweep}[args.command](cfg, layout)
    except DivergenceError as exc:
        print(f"picl: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PiclError as exc:
        print(f"picl: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
