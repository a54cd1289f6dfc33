"""MLP embedding extractor with an additive-angular-margin softmax head.

Forward/backward are written out by hand (no autograd). The final layer is
L2-normalized inside the encoder, so ``backward`` applies the normalization
Jacobian ``(I - f f^T) / ||u||`` before propagating into the MLP.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import ContractError, DegenerateInputError, DivergenceError, ShapeError
from .linalg import l2_normalize_rows

# floor on sin(theta) in the margin derivative; only reached at cos == +-1
_SIN_FLOOR = 1e-6


@dataclass
class ForwardTape:
    """Activations recorded by :meth:`EncoderModel.forward`."""

    layer_inputs: list[np.ndarray]   # a_0 = x, a_1, ..., a_{L-1}
    pre_activations: list[np.ndarray]  # z_0, ..., z_{L-1}; z_{L-1} is the raw embedding u
    norms: np.ndarray                # ||u|| per row
    embeddings: np.ndarray           # f = u / ||u||
    model_id: int
    model_version: int
    squeeze: bool = False


@dataclass
class EncoderGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def as_list(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


class EncoderModel:
    """ReLU MLP ``D_in -> H -> ... -> D_emb`` whose output is L2-normalized.

    Weights are stored as ``(out, in)`` matrices; batches are row-major
    ``(B, D)``. ``version`` increments on every optimizer step so that a tape
    recorded before a step cannot be fed to ``backward`` afterwards.
    """

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[1]} != previous output "
                                 f"{self.weights[i - 1].shape[0]}")
        self.version = 0

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator) -> "EncoderModel":
        """He-normal weights, zero biases."""
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {sizes}")
        weights, biases = [], []
        for d_in, d_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, math.sqrt(2.0 / d_in), size=(d_out, d_in)))
            biases.append(np.zeros(d_out))
        return cls(weights, biases)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "EncoderModel":
        m = EncoderModel(self.weights, self.biases)
        m.version = self.version
        return m

    def forward(self, x) -> tuple[np.ndarray, ForwardTape]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        if a.ndim != 2 or a.shape[1] != self.input_dim:
            raise ShapeError(f"input has dimension {x.shape}, encoder expects {self.input_dim}")
        inputs, pres = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w.T + b
            pres.append(z)
            a = np.maximum(z, 0.0) if i < last else z
        if not np.all(np.isfinite(a)):
            raise DivergenceError("encoder activations overflowed")
        norms = np.linalg.norm(a, axis=1)
        if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
            raise DegenerateInputError("encoder produced a zero or non-finite pre-embedding")
        f = a / norms[:, None]
        tape = ForwardTape(inputs, pres, norms, f, id(self), self.version, squeeze)
        return (f[0] if squeeze else f), tape

    def embed(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape: ForwardTape, grad_embedding) -> EncoderGrads:
        """Reverse-mode gradients of a scalar loss given ``dL/df``."""
        if tape.model_id != id(self) or tape.model_version != self.version:
            raise ContractError("stale or foreign tape: model changed since forward")
        g = np.asarray(grad_embedding, dtype=np.float64)
        if tape.squeeze:
            g = g[None, :]
        f = tape.embeddings
        if g.shape != f.shape:
            raise ShapeError(f"upstream gradient {g.shape} does not match embeddings {f.shape}")
        # through f = u / ||u||
        gz = (g - f * np.sum(f * g, axis=1, keepdims=True)) / tape.norms[:, None]
        n = len(self.weights)
        dws: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        dbs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        for i in range(n - 1, -1, -1):
            a_in = tape.layer_inputs[i]
            dws[i] = gz.T @ a_in
            dbs[i] = gz.sum(axis=0)
            if i:
                ga = gz @ self.weights[i]
                gz = ga * (tape.pre_activations[i - 1] > 0.0)
        return EncoderGrads(dws, dbs)


def normalization_backward(u, grad_f) -> np.ndarray:
    """Gradient w.r.t. ``u`` of a loss whose gradient w.r.t. ``u/||u||`` is ``grad_f``."""
    u = np.asarray(u, dtype=np.float64)
    g = np.asarray(grad_f, dtype=np.float64)
    n = np.linalg.norm(u)
    if n == 0.0:
        raise DegenerateInputError("normalization Jacobian undefined at zero")
    f = u / n
    return (g - f * np.dot(f, g)) / n


@dataclass
class AAMHead:
    """Class-weight matrix with unit rows, scale ``s`` and additive angular margin."""

    weight: np.ndarray
    scale: float = 32.0
    margin: float = 0.2

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError("head weight must be (n_classes, D_emb)")
        if self.scale <= 0:
            raise ContractError("AAM scale must be positive")
        if not 0.0 <= self.margin <= 0.5:
            raise ContractError("AAM margin must lie in [0, 0.5]")

    @classmethod
    def init(cls, n_classes: int, dim: int, rng: np.random.Generator,
             scale: float = 32.0, margin: float = 0.2) -> "AAMHead":
        w = l2_normalize_rows(rng.normal(size=(n_classes, dim)))
        return cls(w, scale, margin)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def renormalize(self) -> None:
        self.weight = l2_normalize_rows(self.weight)


def _margin_target(cos_y: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """cos(theta + m) and its derivative with respect to cos(theta)."""
    c = np.clip(cos_y, -1.0, 1.0)
    sin_t = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    phi = c * math.cos(margin) - sin_t * math.sin(margin)
    dphi = math.cos(margin) + math.sin(margin) * c / np.maximum(sin_t, _SIN_FLOOR)
    if margin == 0.0:
        dphi = np.ones_like(c)
    return phi, dphi


def aam_loss(head: AAMHead, embedding, label):
    """Additive angular margin softmax cross-entropy.

    Accepts a single embedding with an integer label, or a ``(B, D)`` batch
    with ``B`` labels; a batch loss is the mean over rows. Returns
    ``(loss, grad_wrt_embedding, grad_wrt_head_weight)``.
    """
    f = np.asarray(embedding, dtype=np.float64)
    squeeze = f.ndim == 1
    if squeeze:
        f = f[None, :]
    y = np.atleast_1d(np.asarray(label))
    if y.shape != (f.shape[0],):
        raise ShapeError("need exactly one label per embedding")
    if not np.issubdtype(y.dtype, np.integer):
        raise ContractError("labels must be integers")
    if np.any(y < 0) or np.any(y >= head.n_classes):
        raise ContractError(f"label out of range [0, {head.n_classes})")
    if f.shape[1] != head.weight.shape[1]:
        raise ShapeError("embedding dimension does not match head")
    b = f.shape[0]
    rows = np.arange(b)
    cos = f @ head.weight.T
    phi, dphi = _margin_target(cos[rows, y], head.margin)
    logits = head.scale * cos
    logits[rows, y] = head.scale * phi
    # loss = log(1 + sum_{j != y} exp(l_j - l_y)), shifted for overflow safety
    diff = logits - logits[rows, y][:, None]
    diff[rows, y] = -np.inf
    shift = np.maximum(diff.max(axis=1), 0.0)
    ex = np.exp(diff - shift[:, None])
    rest = ex.sum(axis=1)
    per_item = np.where(shift > 0.0, shift + np.log(np.exp(-shift) + rest), np.log1p(rest))
    ex[rows, y] = np.exp(-shift)
    probs = ex / ex.sum(axis=1, keepdims=True)
    dlogits = probs
    dlogits[rows, y] -= 1.0
    dcos = head.scale * dlogits
    dcos[rows, y] *= dphi
    dcos /= b
    grad_f = dcos @ head.weight
    grad_w = dcos.T @ f
    loss = float(per_item.mean())
    return loss, (grad_f[0] if squeeze else grad_f), grad_w


@dataclass
class LRSchedule:
    """Exponential decay ``lr(t) = lr0 * (lr1 / lr0) ** (t / T)``, held at lr1 after T."""

    lr0: float = 1e-3
    lr1: float = 1e-5
    total_steps: int = 1

    def __post_init__(self):
        if self.lr0 <= 0 or self.lr1 <= 0:
            raise ContractError("learning rates must be positive")
        if self.lr1 > self.lr0:
            raise ContractError("schedule must be non-increasing (lr1 <= lr0)")

    def __call__(self, t: int) -> float:
        if self.total_steps <= 0:
            return self.lr0
        frac = min(max(t, 0), self.total_steps) / self.total_steps
        if frac == 1.0:
            return self.lr1
        return self.lr0 * (self.lr1 / self.lr0) ** frac


@dataclass
class SgdOptimizer:
    """Plain SGD with optional heavy-ball momentum (default 0)."""

    schedule: LRSchedule = field(default_factory=LRSchedule)
    momentum: float = 0.0
    _velocity: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def apply(self, params: list[np.ndarray], grads: list[np.ndarray], t: int) -> None:
        lr = self.schedule(t)
        for slot, (p, g) in enumerate(zip(params, grads)):
            if self.momentum:
                v = self._velocity.get(slot)
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[slot] = v
                g = v
            p -= lr * g


def step(model: EncoderModel, grads: EncoderGrads, optimizer: SgdOptimizer, t: int,
         head: AAMHead | None = None, head_grad: np.ndarray | None = None) -> EncoderModel:
    """One in-place SGD update of the encoder (and head, when given)."""
    glist = grads.as_list()
    if head is not None and head_grad is not None:
        glist = glist + [np.asarray(head_grad, dtype=np.float64)]
    for g in glist:
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient at step {t}")
    params = model.parameters()
    if head is not None and head_grad is not None:
        params = params + [head.weight]
    optimizer.apply(params, glist, t)
    for p in params:
        if not np.all(np.isfinite(p)):
            raise DivergenceError(f"non-finite parameter after step {t}")
    if head is not None:
        try:
            head.renormalize()
        except DegenerateInputError as exc:
            raise DivergenceError(f"class weights blew up at step {t}") from exc
    model.version += 1
    return model


def save_model(path, model: EncoderModel, head: AAMHead | None, seed: int | None = None,
               meta: dict | None = None) -> None:
    arrays = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"layer{i}.weight"] = w
        arrays[f"layer{i}.bias"] = b
    info = {"layer_sizes": model.layer_sizes}
    if head is not None:
        arrays["head.weight"] = head.weight
        info["head"] = {"scale": head.scale, "margin": head.margin}
    info.update(meta or {})
    checkpoint.save(path, "encoder", arrays, seed=seed, meta=info)


def load_model(path) -> tuple[EncoderModel, AAMHead | None, dict]:
    header, arrays = checkpoint.load(path, expect_kind="encoder")
    sizes = header["meta"]["layer_sizes"]
    n = len(sizes) - 1
    try:
        weights = [arrays[f"layer{i}.weight"] for i in range(n)]
        biases = [arrays[f"layer{i}.bias"] for i in range(n)]
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"missing array {exc}") from exc
    model = EncoderModel(weights, biases)
    if model.layer_sizes != sizes:
        raise checkpoint.CheckpointError("layer shapes disagree with header")
    head = None
    if "head.weight" in arrays:
        h = header["meta"]["head"]
        head = AAMHead(arrays["head.weight"], h["scale"], h["margin"])
    return model, head, header
