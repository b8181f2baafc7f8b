"""Finite-difference checks for every differentiable building block.

Each check builds a small random problem, wraps the parameters in a
ParamStore and compares reverse-mode gradients with central differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .datagen import SceneParams, generate_scene, render
from .decoder import FeatureMap, ModelConfig, QuerySet, decode_stage, init_params, init_queries, predict_heads
from .geometry import giou_tensor
from .matching import TargetBatch, match_sets, set_losses
from .nn import GradCheckReport, ParamStore, grad_check
from .tensor import Tensor, attention, cross_entropy, gelu, layer_norm, linear, log_softmax, softmax

TOLERANCE = 1e-4


def _store(rng: np.random.Generator, **shapes) -> ParamStore:
    ps = ParamStore()
    for name, shape in shapes.items():
        ps.add(name, rng.normal(size=shape))
    return ps


def _weighted(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    # Random projection so every output entry influences the scalar.
    w = Tensor(rng.normal(size=out.shape))
    return lambda y: (y * w).sum()


def _layer_check(build: Callable[[ParamStore], Tensor], ps: ParamStore, rng) -> GradCheckReport:
    proj = _weighted(build(ps), rng)
    return grad_check(lambda: proj(build(ps)), ps, tol=TOLERANCE, rng=rng)


def check_linear(rng) -> GradCheckReport:
    ps = _store(rng, x=(2, 3, 5), w=(5, 4), b=(4,))
    return _layer_check(lambda p: linear(p["x"], p["w"], p["b"]), ps, rng)


def check_gelu(rng) -> GradCheckReport:
    ps = _store(rng, x=(4, 6))
    return _layer_check(lambda p: gelu(p["x"]), ps, rng)


def check_layer_norm(rng) -> GradCheckReport:
    ps = _store(rng, x=(3, 4, 6), g=(6,), b=(6,))
    return _layer_check(lambda p: layer_norm(p["x"], p["g"], p["b"]), ps, rng)


def check_softmax(rng) -> GradCheckReport:
    ps = _store(rng, x=(3, 5))
    return _layer_check(lambda p: softmax(p["x"]) + log_softmax(p["x"]), ps, rng)


def check_attention(rng) -> GradCheckReport:
    ps = _store(rng, q=(2, 3, 4), k=(2, 5, 4), v=(2, 5, 3), bias=(2, 3, 5))
    return _layer_check(lambda p: attention(p["q"], p["k"], p["v"], p["bias"]), ps, rng)


def check_cross_entropy(rng) -> GradCheckReport:
    ps = _store(rng, logits=(4, 3, 5))
    targets = rng.integers(0, 5, size=(4, 3))
    return _layer_check(lambda p: cross_entropy(p["logits"], targets), ps, rng)


def check_giou(rng) -> GradCheckReport:
    ps = ParamStore()
    ps.add("boxes", np.column_stack([rng.uniform(0.3, 0.7, (6, 2)), rng.uniform(0.1, 0.4, (6, 2))]))
    target = np.column_stack([rng.uniform(0.3, 0.7, (6, 2)), rng.uniform(0.1, 0.4, (6, 2))])
    return _layer_check(lambda p: giou_tensor(p["boxes"], target), ps, rng)


def _tiny_problem(seed: int, dim: int = 8, num_queries: int = 5, images: int = 2):
    sp = SceneParams(grid=4)
    cfg = ModelConfig(num_stages=2, num_queries=num_queries, dim=dim, in_channels=sp.channels)
    samples = [render(generate_scene(seed + i, sp), sp) for i in range(images)]
    x = FeatureMap.from_grids(np.stack([s.features for s in samples]), sp.num_classes)
    targets = TargetBatch.from_list([s.gt for s in samples])
    return cfg, init_params(cfg, seed), x, targets


def check_stage(rng, seed: int = 0) -> GradCheckReport:
    """One decoding stage followed by both heads, under a random projection."""
    cfg, ps, x, _ = _tiny_problem(seed)

    def build(p):
        q = decode_stage(1, init_queries(p, x.num_images), x, p, cfg)
        pr = predict_heads(1, q, p)
        return pr.logits.sum(axis=-1) + pr.boxes.sum(axis=-1) + q.content.sum(axis=-1)

    return _layer_check(build, ps, rng)


def check_composite(rng, seed: int = 0) -> GradCheckReport:
    """Two stages plus the matched detection loss of both stages.

    The assignment is computed once at the unperturbed point and held fixed,
    as it is piecewise constant in the parameters.
    """
    cfg, ps, x, targets = _tiny_problem(seed)

    def forward(p, matches=None):
        q = init_queries(p, x.num_images)
        total, found = None, []
        for s in (1, 2):
            q = decode_stage(s, q, x, p, cfg)
            pr = predict_heads(s, q, p)
            m = match_sets(pr.logits.data, pr.boxes.data, targets) if matches is None else matches[s - 1]
            found.append(m)
            c, l1, g = set_losses(pr.logits, pr.boxes, targets, m)
            term = (c + l1 + g).sum()
            total = term if total is None else total + term
        return total, found

    _, fixed = forward(ps)
    return grad_check(lambda: forward(ps, fixed)[0], ps, tol=TOLERANCE, rng=rng)


CHECKS: dict[str, Callable] = {
    "linear": check_linear,
    "gelu": check_gelu,
    "layer_norm": check_layer_norm,
    "softmax": check_softmax,
    "attention": check_attention,
    "cross_entropy": check_cross_entropy,
    "giou": check_giou,
    "stage": check_stage,
    "stage+loss": check_composite,
}


def run_all(seed: int = 0, names=None) -> dict[str, GradCheckReport]:
    out = {}
    for name in names or CHECKS:
        out[name] = CHECKS[name](np.random.default_rng([seed, len(name)]))
    return out
