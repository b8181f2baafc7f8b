"""Pathway algebra for training-time query recollection.

A training strategy decides, stage by stage, which query sets of the current
collection are decoded by the stage (each decoded set is supervised) and
which are carried forward untouched. The planning half of this module works
on lineages only; the execution half runs the plan on tensors, stacking all
sets decoded at one stage into a single batched call.

Strategies
----------
baseline / reweight / stochdepth
    the basic pathway, one set per stage.
dqr
    every set of C^{s-1} is decoded and C^{s-1} is also kept:
    ``C^s = D^s(C^{s-1}) ∪ C^{s-1}``.
sqr (start stage k)
    basic pathway before stage k; from k on, ``C^s = D^s(C^{s-1}) ∪
    {entries of C^{s-1} born at stage s-1}``.
group designs I, II, III, V
    independent query groups, each with its own pathway (IV and VI are SQR
    with start 2 and 1).
dqrr
    dqr with all stages sharing one parameter set, plus the basic pathway's
    final output decoded once more by the final stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .decoder import FeatureMap, ModelConfig, QuerySet, decode_stage, init_queries
from .errors import ConfigError
from .nn import ParamStore
from .tensor import concat, no_grad, take

Pathway = tuple[int, ...]
EntryKey = tuple[int, Pathway]  # (query group, lineage)

KINDS = ("baseline", "dqr", "sqr", "group", "reweight", "stochdepth", "dqrr")
GROUP_DESIGNS = ("I", "II", "III", "IV", "V", "VI")
DESIGN_GROUPS = {"I": 3, "II": 4, "III": 4, "V": 6}
DEFAULT_COLLECTION_CAP = 128
FIBONACCI_WEIGHTS = (1.0, 2.0, 3.0, 5.0, 8.0, 13.0)


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "baseline"
    start_stage: int = 1
    design: str | None = None
    weights: tuple[float, ...] | None = None
    removal_probs: tuple[float, ...] | None = None
    self_feedback: bool = True
    collection_cap: int = DEFAULT_COLLECTION_CAP

    def validate(self, num_stages: int) -> StrategyConfig:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "sqr" and not 1 <= self.start_stage <= num_stages - 1:
            raise ConfigError(f"sqr start stage must be in 1..{num_stages - 1}")
        if self.kind == "group":
            if self.design not in GROUP_DESIGNS:
                raise ConfigError(f"unknown group design {self.design!r}")
            if self.design in ("II", "III") and num_stages < 4:
                raise ConfigError("designs II/III need at least 4 stages")
        if self.kind == "reweight":
            if self.weights is None or len(self.weights) != num_stages:
                raise ConfigError(f"reweight needs {num_stages} stage weights")
        if self.kind == "stochdepth":
            probs = self.removal_probs
            if probs is None or len(probs) != num_stages:
                raise ConfigError(f"stochdepth needs {num_stages} removal probabilities")
            if any(not 0.0 <= p < 1.0 for p in probs):
                raise ConfigError("removal probabilities must lie in [0, 1)")
        return self

    @property
    def num_query_groups(self) -> int:
        if self.kind == "group" and self.design in DESIGN_GROUPS:
            return DESIGN_GROUPS[self.design]
        return 1

    @property
    def shared_stages(self) -> bool:
        return self.kind == "dqrr"

    def effective(self) -> StrategyConfig:
        """Designs IV and VI are SQR with start 2 and 1."""
        if self.kind == "group" and self.design == "IV":
            return replace(self, kind="sqr", start_stage=2, design=None)
        if self.kind == "group" and self.design == "VI":
            return replace(self, kind="sqr", start_stage=1, design=None)
        return self

    def label(self) -> str:
        if self.kind == "sqr":
            return f"sqr{self.start_stage}"
        if self.kind == "group":
            return f"design{self.design}"
        return self.kind


@dataclass(frozen=True)
class CollectionEntry:
    lineage: Pathway
    group: int = 0
    queries: QuerySet | None = field(default=None, compare=False)

    @property
    def born_at(self) -> int:
        return self.lineage[-1] if self.lineage else 0

    @property
    def key(self) -> EntryKey:
        return (self.group, self.lineage)


def born_at(key: EntryKey) -> int:
    return key[1][-1] if key[1] else 0


def design_pathways(design: str, num_stages: int) -> list[Pathway]:
    full = tuple(range(1, num_stages + 1))
    if design == "I":
        return [full] * 3
    if design == "V":
        return [full] * 6
    if design == "II":
        return [full[: num_stages - k] for k in range(4)]
    if design == "III":
        return [full[k:] for k in range(4)]
    raise ConfigError(f"design {design} has no group pathways")


# -- planning on lineages -------------------------------------------------


@dataclass(frozen=True)
class StagePlan:
    stage: int
    decode: tuple[EntryKey, ...]
    carry: tuple[EntryKey, ...]

    @property
    def produced(self) -> tuple[EntryKey, ...]:
        return tuple((g, lin + (self.stage,)) for g, lin in self.decode)

    @property
    def collection(self) -> tuple[EntryKey, ...]:
        return tuple(sorted(self.produced + self.carry))


def initial_keys(config: StrategyConfig) -> tuple[EntryKey, ...]:
    return tuple((g, ()) for g in range(config.num_query_groups))


def plan_stage(config: StrategyConfig, stage: int, prev: Iterable[EntryKey], num_stages: int) -> StagePlan:
    """Decide which entries of C^{stage-1} are decoded and which are carried."""
    prev = tuple(sorted(prev))
    kind = config.kind
    if kind in ("baseline", "reweight", "stochdepth"):
        decode, carry = prev, ()
    elif kind in ("dqr", "dqrr"):
        decode, carry = prev, prev
    elif kind == "sqr":
        decode = prev
        carry = () if stage < config.start_stage else tuple(k for k in prev if born_at(k) == stage - 1)
    elif kind == "group":
        paths = design_pathways(config.design, num_stages)
        decode = tuple(k for k in prev if stage in paths[k[0]])
        carry = tuple(k for k in prev if stage < paths[k[0]][0])
    else:
        raise ConfigError(f"unsupported strategy {kind!r}")
    plan = StagePlan(stage, decode, carry)
    if len(plan.collection) > config.collection_cap:
        raise ConfigError(
            f"collection at stage {stage} would hold {len(plan.collection)} sets "
            f"(cap {config.collection_cap})"
        )
    return plan


def plan(config: StrategyConfig, num_stages: int) -> list[StagePlan]:
    config = config.validate(num_stages).effective()
    keys = initial_keys(config)
    plans = []
    for s in range(1, num_stages + 1):
        p = plan_stage(config, s, keys, num_stages)
        plans.append(p)
        keys = p.collection
    return plans


def collection_sizes(config: StrategyConfig, num_stages: int) -> list[int]:
    """|C^s| for s = 0..S."""
    plans = plan(config, num_stages)
    return [len(initial_keys(config.effective()))] + [len(p.collection) for p in plans]


def supervision_schedule(config: StrategyConfig, num_stages: int) -> list[int]:
    """Number of supervised query sets per stage.

    Stochastic depth reports the nominal schedule (a skipped stage supervises
    nothing in that step). DQRR adds the self-recollected set at stage S
    unless ``self_feedback`` is off.
    """
    counts = [len(p.decode) for p in plan(config, num_stages)]
    if config.kind == "dqrr" and config.self_feedback:
        counts[-1] += 1
    return counts


def select(entries: Iterable[CollectionEntry], stage: int) -> list[CollectionEntry]:
    """Entries of C^{stage-1} that were produced by stage ``stage - 1``."""
    return [e for e in entries if e.born_at == stage - 1]


# -- execution on tensors ---------------------------------------------------


class Collection:
    """Sets alive after a stage, stored as one stacked block in key order."""

    def __init__(self, keys: list[EntryKey], block: QuerySet):
        if len(keys) != block.num_sets:
            raise ValueError("key count does not match stacked sets")
        self.keys = list(keys)
        self.block = block
        self._index = {k: i for i, k in enumerate(self.keys)}

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def entries(self) -> list[CollectionEntry]:
        return [CollectionEntry(lin, g, self.block.set(i)) for i, (g, lin) in enumerate(self.keys)]

    def subset(self, keys: Iterable[EntryKey]) -> QuerySet:
        idx = [self._index[k] for k in keys]
        if idx == list(range(len(self.keys))):
            return self.block
        return QuerySet(take(self.block.content, idx, axis=1), take(self.block.reference, idx, axis=1))

    @staticmethod
    def merge(parts: list[tuple[list[EntryKey], QuerySet]]) -> Collection:
        parts = [(k, b) for k, b in parts if k]
        keys = [k for ks, _ in parts for k in ks]
        if len(parts) == 1:
            block = parts[0][1]
        else:
            block = QuerySet(
                concat([b.content for _, b in parts], axis=1),
                concat([b.reference for _, b in parts], axis=1),
            )
        order = sorted(range(len(keys)), key=lambda i: keys[i])
        if order != list(range(len(keys))):
            block = QuerySet(take(block.content, order, axis=1), take(block.reference, order, axis=1))
            keys = [keys[i] for i in order]
        return Collection(keys, block)


@dataclass
class StageSupervision:
    stage: int
    queries: QuerySet  # stacked (I, G, n, .) block of supervised sets
    keys: list[EntryKey]

    @property
    def lineages(self) -> list[Pathway]:
        return [lin for _, lin in self.keys]


@dataclass
class SupervisedBatch:
    stages: list[StageSupervision]
    final: QuerySet
    collections: list[Collection] = field(default_factory=list)

    def counts(self, num_stages: int) -> list[int]:
        out = [0] * num_stages
        for sup in self.stages:
            out[sup.stage - 1] += len(sup.keys)
        return out


def sample_skips(probs, rng: np.random.Generator) -> np.ndarray:
    """Independent per-stage removal draws for one mini-batch."""
    return rng.random(len(probs)) < np.asarray(probs)


def collect(
    config: StrategyConfig,
    params: ParamStore,
    cfg: ModelConfig,
    x: FeatureMap,
    q0s: dict[int, QuerySet] | None = None,
    skips: np.ndarray | None = None,
) -> SupervisedBatch:
    """Run a strategy's training-time forward pass."""
    config = config.validate(cfg.num_stages).effective()
    s_count = cfg.num_stages
    if q0s is None:
        q0s = {g: init_queries(params, x.num_images, g) for g in range(config.num_query_groups)}
    keys0 = sorted(initial_keys(config))
    coll = Collection.merge([([k], q0s[k[0]]) for k in keys0])
    stages: list[StageSupervision] = []
    colls = [coll]
    for s in range(1, s_count + 1):
        p = plan_stage(config, s, coll.keys, s_count)
        if skips is not None and skips[s - 1]:
            # Removed stage: sets pass through unchanged and nothing is supervised.
            coll = Collection([(g, lin) for g, lin in coll.keys], coll.block)
            colls.append(coll)
            continue
        inputs = coll.subset(p.decode)
        out = decode_stage(s, inputs, x, params, cfg)
        produced = list(p.produced)
        stages.append(StageSupervision(s, out, produced))
        parts = [(produced, out)]
        if p.carry:
            parts.append((list(p.carry), coll.subset(p.carry)))
        coll = Collection.merge(parts)
        colls.append(coll)
    final_key = (0, tuple(range(1, s_count + 1)))
    if final_key in coll._index:
        final = coll.subset([final_key])
    else:
        # stochastic depth with skipped stages: the single surviving set
        final = coll.block
    if config.kind == "dqrr" and config.self_feedback:
        again = decode_stage(s_count, final, x, params, cfg)
        extra_key = (0, final_key[1] + (s_count,))
        last = stages[-1]
        stages[-1] = StageSupervision(
            last.stage,
            QuerySet(concat([last.queries.content, again.content], axis=1), concat([last.queries.reference, again.reference], axis=1)),
            last.keys + [extra_key],
        )
    return SupervisedBatch(stages, final, colls)


# -- named entry points ------------------------------------------------------


def basic_forward(params, cfg, x, q0=None) -> SupervisedBatch:
    return collect(StrategyConfig("baseline"), params, cfg, x, None if q0 is None else {0: q0})


def dqr_forward(params, cfg, x, q0=None, cap: int = DEFAULT_COLLECTION_CAP) -> SupervisedBatch:
    return collect(StrategyConfig("dqr", collection_cap=cap), params, cfg, x, None if q0 is None else {0: q0})


def sqr_forward(params, cfg, x, start: int = 1, q0=None) -> SupervisedBatch:
    return collect(StrategyConfig("sqr", start_stage=start), params, cfg, x, None if q0 is None else {0: q0})


def group_design_forward(design: str, params, cfg, x, q0s: list[QuerySet] | None = None) -> SupervisedBatch:
    config = StrategyConfig("group", design=design)
    if q0s is not None:
        if len(q0s) != config.num_query_groups:
            raise ConfigError(f"design {design} needs {config.num_query_groups} query groups, got {len(q0s)}")
        return collect(config, params, cfg, x, dict(enumerate(q0s)))
    return collect(config, params, cfg, x)


def stochdepth_forward(params, cfg, x, probs, rng: np.random.Generator, q0=None) -> SupervisedBatch:
    config = StrategyConfig("stochdepth", removal_probs=tuple(probs))
    skips = sample_skips(probs, rng)
    return collect(config, params, cfg, x, None if q0 is None else {0: q0}, skips=skips)


def dqrr_forward(params, cfg, x, q0=None, self_feedback: bool = True) -> SupervisedBatch:
    if not cfg.shared_stages:
        raise ConfigError("dqrr needs a model built with shared_stages=True")
    config = StrategyConfig("dqrr", self_feedback=self_feedback)
    return collect(config, params, cfg, x, None if q0 is None else {0: q0})


# -- inference -----------------------------------------------------------------


def infer(params, cfg, x, q0=None, residual_scales=None) -> list[QuerySet]:
    """Basic-pathway inference; returns the query set after each stage."""
    with no_grad():
        q = init_queries(params, x.num_images) if q0 is None else q0
        out = []
        for s in range(1, cfg.num_stages + 1):
            scale = 1.0 if residual_scales is None else float(residual_scales[s - 1])
            q = decode_stage(s, q, x, params, cfg, residual_scale=scale)
            out.append(q)
    return out


def stochdepth_infer(params, cfg, x, probs, q0=None) -> QuerySet:
    """Inference with each stage's residual scaled by its survival rate."""
    return infer(params, cfg, x, q0, residual_scales=[1.0 - p for p in probs])[-1]


def recurrent_infer(params, cfg, x, depth: int, stage: int | None = None, q0=None) -> list[QuerySet]:
    """Apply one stage ``depth`` times, returning every intermediate set.

    Defaults to the final stage, giving the pathway S-S-...-S.
    """
    stage = cfg.num_stages if stage is None else stage
    with no_grad():
        q = init_queries(params, x.num_images) if q0 is None else q0
        out = []
        for _ in range(depth):
            q = decode_stage(stage, q, x, params, cfg)
            out.append(q)
    return out


def dqrr_infer(params, cfg, x, depth: int, q0=None) -> list[QuerySet]:
    if not cfg.shared_stages:
        raise ConfigError("dqrr inference needs shared stage parameters")
    return recurrent_infer(params, cfg, x, depth, cfg.num_stages, q0)


def fibonacci(count: int) -> list[int]:
    seq = [1, 2]
    while len(seq) < count:
        seq.append(seq[-1] + seq[-2])
    return seq[:count]


def geometric(count: int) -> list[int]:
    return [2**k for k in range(count)]

