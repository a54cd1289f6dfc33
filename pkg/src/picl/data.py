"""Synthetic speaker worlds with a controllable domain shift.

Source utterances place speaker identity in a low-dimensional subspace of
the feature space and fill the remaining coordinates with nuisance
variation. Target utterances pass the same generative process through a
fixed rotation, a bias and extra noise, so an encoder fit to the source
subspace reads partly nuisance on the target side. Source and target
speakers are disjoint, as are the adaptation and evaluation speakers.
"""
from __future__ import annotations

import math
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes
from .errors import ConfigError, ContractError

DATASET_VERSION = 1
TRIALS_VERSION = 1


@dataclass(frozen=True)
class WorldSpec:
    n_source_speakers: int = 20
    n_target_speakers: int = 15
    utts_per_speaker: int = 50
    dim: int = 20
    n_eval_speakers: int = 15
    eval_utts_per_speaker: int = 10
    speaker_dim: int = 5
    speaker_radius: float = 1.0
    sigma_within: float = 0.05
    sigma_nuisance: float = 0.08
    rotation: float = 0.8
    bias: float = 0.5
    sigma_domain: float = 0.03
    nontarget_ratio: float = 1.0

    def validate(self) -> None:
        if self.n_target_speakers < 2 or self.n_eval_speakers < 2:
            raise ConfigError("need at least 2 target speakers to build trials")
        if self.n_source_speakers < 1 or self.utts_per_speaker < 1:
            raise ConfigError("need at least one source speaker with one utterance")
        if self.eval_utts_per_speaker < 2:
            raise ConfigError("eval speakers need >= 2 utterances for target trials")
        if not 1 <= self.speaker_dim <= self.dim:
            raise ConfigError("speaker_dim must lie in [1, dim]")
        for name in ("sigma_within", "sigma_nuisance", "rotation", "bias", "sigma_domain"):
            if getattr(self, name) < 0:
                raise ConfigError(f"world.{name} must be non-negative")
        if self.nontarget_ratio <= 0:
            raise ConfigError("world.nontarget_ratio must be positive")

    def n_target_trials(self) -> int:
        return self.n_eval_speakers * math.comb(self.eval_utts_per_speaker, 2)

    def n_nontarget_trials(self) -> int:
        n = self.n_eval_speakers * self.eval_utts_per_speaker
        cross = math.comb(n, 2) - self.n_target_trials()
        return min(cross, int(round(self.nontarget_ratio * self.n_target_trials())))


@dataclass
class Split:
    features: np.ndarray   # (N, dim)
    speakers: np.ndarray   # (N,) speaker id, local to the split
    domain: str

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class SpeakerWorld:
    spec: WorldSpec
    seed: int
    rotation: np.ndarray | None
    bias: np.ndarray | None
    source_train: Split
    target_adapt: Split      # speaker ids kept only for diagnostics
    source_eval: Split
    target_eval: Split
    source_trials: np.ndarray  # (n, 3) enroll, test, is_target
    target_trials: np.ndarray


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


def random_rotation(dim: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Cayley transform of a random skew-symmetric matrix; 0 gives the identity."""
    g = rng.normal(size=(dim, dim))
    a = strength * (g - g.T) / math.sqrt(2.0 * dim)
    eye = np.eye(dim)
    return np.linalg.solve(eye - a, eye + a)


def _sample_speakers(spec: WorldSpec, n_speakers: int, n_utts: int, rng) -> tuple[np.ndarray, np.ndarray]:
    means = rng.normal(size=(n_speakers, spec.speaker_dim))
    means *= spec.speaker_radius / np.linalg.norm(means, axis=1, keepdims=True)
    spk = np.repeat(np.arange(n_speakers), n_utts)
    x = np.zeros((spk.size, spec.dim))
    x[:, :spec.speaker_dim] = means[spk] + spec.sigma_within * rng.normal(size=(spk.size, spec.speaker_dim))
    if spec.dim > spec.speaker_dim:
        x[:, spec.speaker_dim:] = spec.sigma_nuisance * rng.normal(size=(spk.size, spec.dim - spec.speaker_dim))
    return x, spk


def make_trials(speakers: np.ndarray, nontarget_ratio: float, rng) -> np.ndarray:
    """All same-speaker pairs plus a random sample of cross-speaker pairs."""
    i, j = np.triu_indices(speakers.size, k=1)
    same = speakers[i] == speakers[j]
    tgt = np.stack([i[same], j[same], np.ones(same.sum(), dtype=np.int64)], axis=1)
    cross = np.flatnonzero(~same)
    n_non = min(cross.size, int(round(nontarget_ratio * tgt.shape[0])))
    pick = np.sort(rng.choice(cross, size=n_non, replace=False))
    non = np.stack([i[pick], j[pick], np.zeros(n_non, dtype=np.int64)], axis=1)
    return np.concatenate([tgt, non]).astype(np.int64)


def generate_world(spec: WorldSpec = WorldSpec(), seed: int = 0) -> SpeakerWorld:
    spec.validate()
    rng = _rng(seed, 1)
    rot = random_rotation(spec.dim, spec.rotation, rng)
    bias_dir = rng.normal(size=spec.dim)
    bias = spec.bias * bias_dir / np.linalg.norm(bias_dir)

    def shift(x):
        return x @ rot.T + bias + spec.sigma_domain * rng.normal(size=x.shape)

    xs, ys = _sample_speakers(spec, spec.n_source_speakers, spec.utts_per_speaker, rng)
    xt, yt = _sample_speakers(spec, spec.n_target_speakers, spec.utts_per_speaker, rng)
    xt = shift(xt)
    xse, yse = _sample_speakers(spec, spec.n_eval_speakers, spec.eval_utts_per_speaker, rng)
    xte, yte = _sample_speakers(spec, spec.n_eval_speakers, spec.eval_utts_per_speaker, rng)
    xte = shift(xte)
    return SpeakerWorld(
        spec=spec, seed=seed, rotation=rot, bias=bias,
        source_train=Split(xs, ys, "source"),
        target_adapt=Split(xt, yt, "target"),
        source_eval=Split(xse, yse, "source"),
        target_eval=Split(xte, yte, "target"),
        source_trials=make_trials(yse, spec.nontarget_ratio, rng),
        target_trials=make_trials(yte, spec.nontarget_ratio, rng),
    )


@dataclass(frozen=True)
class AugmentConfig:
    """Feature-space view augmentation: scale jitter, Gaussian noise, coordinate dropout."""

    sigma: float = 0.1
    scale_jitter: float = 0.1
    p_drop: float = 0.1

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError("augment sigma must be >= 0")
        if not 0.0 <= self.scale_jitter < 1.0:
            raise ContractError("scale jitter must lie in [0, 1)")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ContractError("dropout probability must lie in [0, 1]")


def make_view(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Fresh augmented copy of one utterance (1-D) or a batch of them (2-D)."""
    x = np.asarray(x, dtype=np.float64)
    batch = np.atleast_2d(x)
    n, d = batch.shape
    # draws happen unconditionally so the stream position is config-independent
    scale = rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter, size=(n, 1))
    noise = rng.normal(size=(n, d))
    keep = rng.random(size=(n, d)) >= cfg.p_drop
    view = (batch * scale + cfg.sigma * noise) * keep
    return view[0] if x.ndim == 1 else view


@dataclass
class Batch:
    source_idx: np.ndarray
    target_idx: np.ndarray
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_views: np.ndarray | None
    source_views: np.ndarray | None = None


class EpochSampler:
    """Per-epoch batch schedule.

    Pretraining walks a fresh permutation of the source pool. Adaptation
    partitions a permutation of the target pool into ``ceil(n_t / B_t)``
    batches and draws source items from a permutation that is refilled
    whenever it runs dry, so no source item repeats before all have been used.
    """

    def __init__(self, n_source: int, n_target: int, b_s: int, b_t: int, rng: np.random.Generator):
        if n_source <= 0:
            raise ConfigError("source pool is empty")
        self.n_source, self.n_target = n_source, n_target
        self.b_s, self.b_t = b_s, b_t
        self.rng = rng
        self._src_queue = np.zeros(0, dtype=np.int64)

    def _take_source(self, k: int) -> np.ndarray:
        out = []
        need = k
        while need:
            if self._src_queue.size == 0:
                self._src_queue = self.rng.permutation(self.n_source)
            take = self._src_queue[:need]
            self._src_queue = self._src_queue[need:]
            out.append(take)
            need -= take.size
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def pretrain_epoch(self) -> list[np.ndarray]:
        if self.b_s <= 0:
            raise ConfigError("pretraining needs batch.source > 0")
        perm = self.rng.permutation(self.n_source)
        return [perm[i:i + self.b_s] for i in range(0, self.n_source, self.b_s)]

    def adapt_epoch(self) -> list[tuple[np.ndarray, np.ndarray]]:
        if self.b_s <= 0:
            raise ConfigError("adaptation needs batch.source > 0 (source loss is undefined otherwise)")
        if self.b_t <= 0 or self.n_target <= 0:
            raise ConfigError("adaptation needs a non-empty target pool and batch.target > 0")
        perm = self.rng.permutation(self.n_target)
        return [(self._take_source(self.b_s), perm[i:i + self.b_t])
                for i in range(0, self.n_target, self.b_t)]


def assemble_batch(source: Split, target: Split | None, source_idx, target_idx,
                   aug: AugmentConfig | None, rng: np.random.Generator | None,
                   source_views: bool = False) -> Batch:
    source_idx = np.asarray(source_idx, dtype=np.int64)
    target_idx = np.asarray(target_idx, dtype=np.int64)
    sx = source.features[source_idx]
    dim = source.features.shape[1]
    tx = target.features[target_idx] if target is not None and target_idx.size else np.zeros((0, dim))
    tv = make_view(tx, aug, rng) if (aug is not None and tx.shape[0]) else None
    sv = make_view(sx, aug, rng) if (aug is not None and source_views and sx.shape[0]) else None
    return Batch(source_idx, target_idx, sx, source.speakers[source_idx], tx, tv, sv)


# ---------------------------------------------------------------- file formats

def _fmt(v: float) -> str:
    return repr(float(v))


def write_split(path, split: Split) -> None:
    """``domain,speaker_id,instance_index,f_0,...,f_{D-1}``, one utterance per line."""
    lines = [f"# picl-dataset v{DATASET_VERSION} dim={split.features.shape[1]}"]
    for i, (row, spk) in enumerate(zip(split.features, split.speakers)):
        lines.append(",".join([split.domain, str(int(spk)), str(i)] + [_fmt(v) for v in row]))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_split(path) -> Split:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(f"# picl-dataset v{DATASET_VERSION}"):
        raise ContractError(f"{path}: not a picl-dataset v{DATASET_VERSION} file")
    rows, spk, domains = [], [], set()
    for n, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if int(parts[2]) != len(rows):
            raise ContractError(f"{path}:{n}: instance_index out of sequence")
        domains.add(parts[0])
        spk.append(int(parts[1]))
        rows.append([float(v) for v in parts[3:]])
    if len(domains) > 1:
        raise ContractError(f"{path}: mixed domains {sorted(domains)}")
    return Split(np.array(rows, dtype=np.float64), np.array(spk, dtype=np.int64),
                 domains.pop() if domains else "source")


def write_trials(path, trials: np.ndarray) -> None:
    """``enroll_index,test_index,target|nontarget`` per line."""
    lines = [f"# picl-trials v{TRIALS_VERSION}"]
    for e, t, lab in trials:
        lines.append(f"{int(e)},{int(t)},{'target' if lab else 'nontarget'}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_trials(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(f"# picl-trials v{TRIALS_VERSION}"):
        raise ContractError(f"{path}: not a picl-trials v{TRIALS_VERSION} file")
    out = []
    for n, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        e, t, lab = line.split(",")
        if lab not in ("target", "nontarget"):
            raise ContractError(f"{path}:{n}: bad trial label {lab!r}")
        out.append((int(e), int(t), 1 if lab == "target" else 0))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


WORLD_FILES = {
    "source_train": "source_train.csv",
    "target_adapt": "target_adapt.csv",
    "source_eval": "source_eval.csv",
    "target_eval": "target_eval.csv",
}


def save_world(directory, world: SpeakerWorld) -> dict[str, Path]:
    d = Path(directory)
    paths = {}
    for attr, name in WORLD_FILES.items():
        paths[attr] = d / name
        write_split(paths[attr], getattr(world, attr))
    paths["source_trials"] = d / "source_trials.csv"
    paths["target_trials"] = d / "target_trials.csv"
    write_trials(paths["source_trials"], world.source_trials)
    write_trials(paths["target_trials"], world.target_trials)
    paths["manifest"] = d / "world.json"
    manifest = {"version": DATASET_VERSION, "seed": world.seed, "spec": asdict(world.spec)}
    atomic_write_bytes(paths["manifest"],
                       (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode("ascii"))
    return paths


def load_world(directory) -> SpeakerWorld:
    """Read back a world written by :func:`save_world` (domain transform not stored)."""
    d = Path(directory)
    manifest_path = d / "world.json"
    if not manifest_path.exists():
        raise ContractError(f"{d}: no world.json; run `picl generate` first")
    manifest = json.loads(manifest_path.read_text())
    splits = {attr: read_split(d / name) for attr, name in WORLD_FILES.items()}
    return SpeakerWorld(
        spec=WorldSpec(**manifest["spec"]), seed=manifest["seed"], rotation=None, bias=None,
        source_trials=read_trials(d / "source_trials.csv"),
        target_trials=read_trials(d / "target_trials.csv"),
        **splits,
    )
