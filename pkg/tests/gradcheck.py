"""Random small encoder + memory problems for finite-difference gradient checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from oracles import central_difference, max_relative_error
from picl.encoder import AAMHead, EncoderModel, aam_loss
from picl.linalg import l2_normalize_rows
from picl.losses import (BatchOutputs, LossConfig, PositiveRef, combined_loss, instance_loss,
                         prototype_loss)
from picl.memory import HybridMemory

COMPONENTS = ("L_s", "L_p", "L_i", "total")


@dataclass
class Problem:
    model: EncoderModel
    head: AAMHead
    memory: HybridMemory
    clusters: object
    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray
    pseudo: np.ndarray
    xv: np.ndarray
    cfg: LossConfig


def random_problem(rng: np.random.Generator, cfg: LossConfig = LossConfig(),
                   scale: float = 32.0, margin: float = 0.2) -> Problem:
    """D_in <= 8, H <= 8, at most 5 prototypes; avoids ReLU kinks near zero."""
    while True:
        d_in = int(rng.integers(2, 9))
        h = int(rng.integers(2, 9))
        d_emb = int(rng.integers(2, 7))
        n_s = int(rng.integers(1, 4))
        n_c = int(rng.integers(1, 6 - n_s))
        n_t = n_c + int(rng.integers(0, 3))
        model = EncoderModel.init([d_in, h, h, d_emb], rng)
        for b in model.biases:
            b += rng.normal(0, 0.1, size=b.shape)
        head = AAMHead(l2_normalize_rows(rng.normal(size=(n_s, d_emb))), scale, margin)
        assignment = np.concatenate([np.arange(n_c), rng.integers(0, n_c, size=n_t - n_c)])
        memory = HybridMemory(l2_normalize_rows(rng.normal(size=(n_s, d_emb))),
                              l2_normalize_rows(rng.normal(size=(n_t, d_emb))))
        clusters = memory.cluster_prototypes(assignment)
        b_s, b_t = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        xs = rng.normal(size=(b_s, d_in))
        xt = rng.normal(size=(b_t, d_in))
        xv = xt + 0.3 * rng.normal(size=xt.shape)
        ys = rng.integers(0, n_s, size=b_s)
        pseudo = rng.integers(0, n_c, size=b_t)
        _, tape = model.forward(np.concatenate([xs, xt, xv]))
        if min(np.abs(z).min() for z in tape.pre_activations[:-1]) > 1e-3:
            return Problem(model, head, memory, clusters, xs, ys, xt, pseudo, xv, cfg)


def component_value_and_grad(p: Problem, which: str):
    """Loss value plus analytic gradients [encoder params..., head weight]."""
    b_s, b_t = len(p.xs), len(p.xt)
    f, tape = p.model.forward(np.concatenate([p.xs, p.xt, p.xv]))
    f_s, f_t, f_v = f[:b_s], f[b_s:b_s + b_t], f[b_s + b_t:]
    g = np.zeros_like(f)
    g_head = np.zeros_like(p.head.weight)
    if which == "L_s":
        value, g[:b_s], g_head = aam_loss(p.head, f_s, p.ys)
    elif which == "L_p":
        refs = [PositiveRef("source", int(y)) for y in p.ys] + \
               [PositiveRef("target", int(c)) for c in p.pseudo]
        value = 0.0
        for row, (emb, ref) in enumerate(zip(np.concatenate([f_s, f_t]), refs)):
            l, gr = prototype_loss(emb, ref, p.memory, p.clusters, p.cfg)
            value += l / len(refs)
            g[row] = gr / len(refs)
    elif which == "L_i":
        l, ga, gb = instance_loss(f_t, f_v)
        value = float(np.mean(l))
        g[b_s:b_s + b_t] = ga / b_t
        g[b_s + b_t:] = gb / b_t
    elif which == "total":
        res = combined_loss(BatchOutputs(f_s, p.ys, f_t, p.pseudo, f_v), p.head, p.memory,
                            p.clusters, p.cfg)
        value = res.total
        g = np.concatenate([res.grad_source, res.grad_target, res.grad_target_views])
        g_head = res.grad_head
    else:
        raise ValueError(which)
    grads = p.model.backward(tape, g).as_list() + [g_head]
    return value, grads


def check(p: Problem, which: str, h: float = 1e-5) -> float:
    _, analytic = component_value_and_grad(p, which)
    params = p.model.parameters() + [p.head.weight]
    numeric = central_difference(lambda: component_value_and_grad(p, which)[0], params, h)
    return max_relative_error(analytic, numeric)
