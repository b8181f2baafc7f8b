"""The staged query decoder.

A query is a content vector plus a reference box. A stage adds one residual
term to the content (self-attention within the query set, cross-attention to
the feature grid, feed-forward), then nudges the reference box in logit
space. Every tensor in here carries a set axis: contents are shaped
``(images, sets, queries, dim)`` so that several query sets can share one
call while self-attention stays inside each set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import ParamStore, dense, init_linear, init_mlp, init_norm, mlp
from .tensor import Tensor, attention, concat, layer_norm, logit

# Floor on the spatial-prior width so tiny references still see a few cells.
PRIOR_MIN_SIGMA = 0.05


@dataclass(frozen=True)
class ModelConfig:
    num_stages: int = 6
    num_queries: int = 20
    dim: int = 64
    num_classes: int = 4
    in_channels: int = 8
    ffn_mult: int = 2
    shared_stages: bool = False
    num_query_groups: int = 1
    spatial_prior: bool = True

    def __post_init__(self):
        if self.num_stages < 1:
            raise ConfigError("num_stages must be >= 1")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be >= 1")


@dataclass
class QuerySet:
    """A block of query sets: content (I, G, n, d) and reference (I, G, n, 4)."""

    content: Tensor
    reference: Tensor

    @property
    def num_sets(self) -> int:
        return self.content.shape[1]

    def set(self, g: int) -> QuerySet:
        return QuerySet(self.content[:, g : g + 1], self.reference[:, g : g + 1])


@dataclass
class FeatureMap:
    """Flattened feature grid (I, H*W, C) and per-cell positions (I, H*W, 2)."""

    values: np.ndarray
    positions: np.ndarray

    @classmethod
    def from_grids(cls, grids: np.ndarray, num_classes: int) -> FeatureMap:
        """Build from rendered grids (I, H, W, C); positions are read from the
        two positional channels following the class channels."""
        grids = np.asarray(grids, dtype=np.float64)
        if grids.ndim == 3:
            grids = grids[None]
        i, h, w, c = grids.shape
        flat = grids.reshape(i, h * w, c)
        return cls(flat, flat[:, :, num_classes : num_classes + 2].copy())

    @property
    def num_images(self) -> int:
        return self.values.shape[0]


def stage_prefix(s: int) -> str:
    return f"stage{s}"


def head_prefix(s: int) -> str:
    return f"head{s}"


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Fresh parameters.

    Linear weights are uniform with fan-in scaling. Initial query contents are
    small, reference logits start near the image center with boxes of side
    ~0.18. With ``shared_stages`` only stage/head ``S`` exist; every other
    stage index aliases them.
    """
    rng = np.random.default_rng(seed)
    params = ParamStore()
    d, k = cfg.dim, cfg.num_classes
    for g in range(cfg.num_query_groups):
        qp = query_prefix(g)
        params.add(f"{qp}/content", rng.normal(0.0, 0.02, size=(cfg.num_queries, d)))
        ref = np.empty((cfg.num_queries, 4))
        ref[:, :2] = rng.uniform(-0.5, 0.5, size=(cfg.num_queries, 2))
        ref[:, 2:] = -1.5
        params.add(f"{qp}/ref", ref)
    stages = [cfg.num_stages] if cfg.shared_stages else range(1, cfg.num_stages + 1)
    for s in stages:
        p = stage_prefix(s)
        for ln in ("ln1", "ln2", "ln3"):
            init_norm(params, f"{p}/{ln}", d)
        init_mlp(params, f"{p}/pos", (4, d, d), rng)
        for name in ("sa_q", "sa_k", "sa_v", "sa_o", "ca_q", "ca_o"):
            init_linear(params, f"{p}/{name}", d, d, rng)
        init_linear(params, f"{p}/feat_k", cfg.in_channels, d, rng)
        init_linear(params, f"{p}/feat_v", cfg.in_channels, d, rng)
        init_mlp(params, f"{p}/ffn", (d, cfg.ffn_mult * d, d), rng)
        init_mlp(params, f"{p}/ref", (d, d, 4), rng, out_scale=0.1)
        h = head_prefix(s)
        init_mlp(params, f"{h}/cls", (d, d, k + 1), rng)
        init_mlp(params, f"{h}/reg", (d, d, 4), rng, out_scale=0.1)
    if cfg.shared_stages:
        for s in range(1, cfg.num_stages):
            params.alias(stage_prefix(s), stage_prefix(cfg.num_stages))
            params.alias(head_prefix(s), head_prefix(cfg.num_stages))
    return params


def query_prefix(group: int) -> str:
    return "queries" if group == 0 else f"queries{group}"


def init_queries(params: ParamStore, num_images: int, group: int = 0) -> QuerySet:
    """The learned initial query set q^0, broadcast to ``num_images``."""
    qp = query_prefix(group)
    content = params[f"{qp}/content"]
    ref_logits = params[f"{qp}/ref"]
    n, d = content.shape
    ones = Tensor(np.zeros((num_images, 1, 1, 1)))
    return QuerySet(
        content.reshape(1, 1, n, d) + ones,
        ref_logits.sigmoid().reshape(1, 1, n, 4) + ones,
    )


def _spatial_bias(ref: Tensor, positions: np.ndarray) -> Tensor:
    """Log of an axis-aligned Gaussian centred on each reference box.

    ``-((u - cx)^2 / sx^2 + (v - cy)^2 / sy^2) / 2`` expands into a rank-5
    product between per-query and per-cell features, which avoids building
    the (queries x cells) difference tensors.
    """
    # ref (I, Q, 4); positions (I, HW, 2) -> (I, Q, HW)
    cx = ref[..., 0:1]
    cy = ref[..., 1:2]
    a = (ref[..., 2:3] * 0.5 + PRIOR_MIN_SIGMA) ** -2.0
    b = (ref[..., 3:4] * 0.5 + PRIOR_MIN_SIGMA) ** -2.0
    qa = cx * a
    qb = cy * b
    query_feats = concat([a, qa, qa * cx + qb * cy, b, qb], axis=-1)
    u = positions[..., 0]
    v = positions[..., 1]
    cell_feats = np.stack([-0.5 * u * u, u, np.full_like(u, -0.5), -0.5 * v * v, v], axis=1)
    return query_feats @ Tensor(cell_feats)


def decode_stage(
    s: int,
    q: QuerySet,
    x: FeatureMap,
    params: ParamStore,
    cfg: ModelConfig,
    residual_scale: float = 1.0,
) -> QuerySet:
    """One refinement stage: ``content + residual(content, set, features)``.

    ``residual_scale`` multiplies the residual term (content and reference
    update); the skip path is left untouched.
    """
    if not 1 <= s <= cfg.num_stages:
        raise ConfigError(f"stage {s} outside 1..{cfg.num_stages}")
    p = stage_prefix(s)
    c, ref = q.content, q.reference
    i_count, g_count, n, d = c.shape

    pos = mlp(ref, params, f"{p}/pos")
    h = layer_norm(c, params[f"{p}/ln1/g"], params[f"{p}/ln1/b"])
    hp = h + pos
    sa = attention(dense(hp, params, f"{p}/sa_q"), dense(hp, params, f"{p}/sa_k"), dense(h, params, f"{p}/sa_v"))
    a1 = dense(sa, params, f"{p}/sa_o")
    h1 = c + a1

    hq = layer_norm(h1, params[f"{p}/ln2/g"], params[f"{p}/ln2/b"]) + pos
    cq = dense(hq, params, f"{p}/ca_q").reshape(i_count, g_count * n, d)
    feats = Tensor(x.values)
    keys = dense(feats, params, f"{p}/feat_k")
    vals = dense(feats, params, f"{p}/feat_v")
    bias = _spatial_bias(ref.reshape(i_count, g_count * n, 4), x.positions) if cfg.spatial_prior else None
    ca = attention(cq, keys, vals, bias).reshape(i_count, g_count, n, d)
    a2 = dense(ca, params, f"{p}/ca_o")
    h2 = h1 + a2

    a3 = mlp(layer_norm(h2, params[f"{p}/ln3/g"], params[f"{p}/ln3/b"]), params, f"{p}/ffn")
    if residual_scale == 1.0:
        new_c = h2 + a3
        delta = mlp(new_c, params, f"{p}/ref")
    else:
        new_c = c + (a1 + a2 + a3) * residual_scale
        delta = mlp(new_c, params, f"{p}/ref") * residual_scale
    new_ref = (logit(ref) + delta).sigmoid()
    return QuerySet(new_c, new_ref)


@dataclass
class Predictions:
    """Class logits (I, G, n, K+1), background last, and boxes (I, G, n, 4)."""

    logits: Tensor
    boxes: Tensor


def predict_heads(s: int, q: QuerySet, params: ParamStore) -> Predictions:
    """Classification and box heads of stage ``s``.

    The regression head outputs additive deltas on the query's reference box;
    the result is clamped to [0, 1].
    """
    h = head_prefix(s)
    logits = mlp(q.content, params, f"{h}/cls")
    boxes = (q.reference + mlp(q.content, params, f"{h}/reg")).clamp(0.0, 1.0)
    return Predictions(logits, boxes)


def count_stage_params(params: ParamStore, cfg: ModelConfig) -> int:
    """Distinct decoder values (stages and heads), excluding initial queries."""
    return sum(t.data.size for k, t in params.items() if k.startswith("stage") or k.startswith("head"))
