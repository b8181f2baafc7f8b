"""Training loop, evaluation and run-directory artifacts.

A run directory holds::

    config.json            effective config (after file + overrides)
    metrics.jsonl          one record per optimizer step
    epochs.csv             one row per epoch (mean losses, wall time)
    checkpoints/epoch_NNN.qrck, final.qrck
    eval/                  written by evaluate_run (AP table, dumps)

Everything except wall-time fields is a pure function of the config.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .datagen import GroundTruth, RenderedSample, dataset
from .decoder import FeatureMap, ModelConfig, init_params, predict_heads
from .diagnostics import StagePredictions, stage_ap
from .errors import ConfigError, DivergenceError, SchemaError
from .matching import LossWeights, TargetBatch, aggregate_losses, match_sets, set_losses, softmax_np
from .nn import OptimState, ParamStore, opt_step
from .recollection import collect, infer, recurrent_infer, sample_skips

log = logging.getLogger(__name__)

EPOCH_CSV_FIELDS = ("epoch", "steps", "loss", "lr", "wall_time")


@dataclass
class Split:
    """A rendered split held as arrays."""

    seeds: np.ndarray
    features: FeatureMap
    gts: list[GroundTruth]

    def __len__(self) -> int:
        return len(self.gts)

    def batch(self, idx) -> tuple[FeatureMap, TargetBatch]:
        idx = np.asarray(idx)
        fm = FeatureMap(self.features.values[idx], self.features.positions[idx])
        return fm, TargetBatch.from_list([self.gts[i] for i in idx])

    @classmethod
    def from_samples(cls, samples: list[RenderedSample], num_classes: int) -> Split:
        grids = np.stack([s.features for s in samples]) if samples else np.zeros((0, 1, 1, num_classes + 4))
        return cls(
            np.array([s.seed for s in samples], dtype=np.uint64),
            FeatureMap.from_grids(grids, num_classes),
            [s.gt for s in samples],
        )


def load_split(cfg: RunConfig, split: str) -> Split:
    size = cfg.train_size if split == "train" else cfg.val_size
    return Split.from_samples(list(dataset(split, size, cfg.data_seed, cfg.scene())), cfg.num_classes)


def lr_at(cfg: RunConfig, epoch: int) -> float:
    """Learning rate for a 0-based epoch: constant with one optional step drop."""
    if cfg.lr_drop_epoch is not None and epoch >= cfg.lr_drop_epoch:
        return cfg.lr * cfg.lr_drop_factor
    return cfg.lr


# -- one step -------------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    stage_losses: list[float]
    counts: list[int]
    grad_norm: float


def training_loss(cfg: RunConfig, params: ParamStore, mcfg: ModelConfig, x: FeatureMap, targets: TargetBatch, skips=None):
    """Forward a strategy, match every supervised set and sum the losses."""
    strat = cfg.strategy
    batch = collect(strat, params, mcfg, x, skips=skips)
    per_stage = {}
    for sup in batch.stages:
        pr = predict_heads(sup.stage, sup.queries, params)
        match = match_sets(pr.logits.data, pr.boxes.data, targets)
        c, l1, g = set_losses(pr.logits, pr.boxes, targets, match, LossWeights())
        per_stage[sup.stage] = c + l1 + g
    total = aggregate_losses(per_stage, strat.kind, mcfg.num_stages, strat.weights)
    stage_losses = [float(per_stage[s].data.sum()) if s in per_stage else 0.0 for s in range(1, mcfg.num_stages + 1)]
    return total, stage_losses, batch.counts(mcfg.num_stages)


# -- state --------------------------------------------------------------------


def checkpoint_meta(cfg: RunConfig, mcfg: ModelConfig, params: ParamStore, epoch: int, opt: OptimState) -> dict:
    return {
        "format": "qrlab-checkpoint",
        "epoch": epoch,
        "optimizer": {"step": opt.step, "lr": opt.lr},
        "model": mcfg.__dict__.copy(),
        "strategy": cfg.to_dict()["strategy"],
        "run": cfg.to_dict(),
        "aliases": params.aliases,
    }


def make_checkpoint(cfg: RunConfig, mcfg: ModelConfig, params: ParamStore, epoch: int, opt: OptimState) -> Checkpoint:
    return Checkpoint(
        checkpoint_meta(cfg, mcfg, params, epoch, opt),
        {k: t.data for k, t in params.items()},
        dict(opt.m),
        dict(opt.v),
    )


def restore(ckpt: Checkpoint) -> tuple[RunConfig, ModelConfig, ParamStore]:
    """Rebuild config, model config and parameters from a checkpoint."""
    meta = ckpt.meta
    if meta.get("format") != "qrlab-checkpoint":
        raise SchemaError("checkpoint metadata lacks the qrlab-checkpoint marker")
    cfg = RunConfig.from_dict(meta["run"])
    mcfg = ModelConfig(**meta["model"])
    params = init_params(mcfg, 0)
    if sorted(ckpt.params) != list(params):
        raise SchemaError("checkpoint parameters do not match the model layout")
    params.load(ckpt.params)
    return cfg, mcfg, params


# -- training --------------------------------------------------------------------


@dataclass
class TrainResult:
    run_dir: Path
    params: ParamStore
    model: ModelConfig
    config: RunConfig
    steps: int
    wall_time: float


def train(cfg: RunConfig, train_split: Split | None = None, quiet: bool = False) -> TrainResult:
    """Train one run and write its artifacts.

    Raises :class:`DivergenceError` on a non-finite loss after dumping the
    offending state to ``diverged.qrck`` and ``diverged.json``.
    """
    cfg = cfg.validate()
    mcfg = cfg.model()
    run_dir = cfg.run_dir()
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    data = train_split if train_split is not None else load_split(cfg, "train")

    params = init_params(mcfg, cfg.seed)
    opt = OptimState(
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm
    )
    # Separate streams: shuffling must not depend on whether stages get dropped.
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    skip_rng = np.random.default_rng([cfg.seed, 2])
    probs = cfg.strategy.removal_probs if cfg.strategy.kind == "stochdepth" else None

    t0 = time.perf_counter()
    step = 0
    with open(run_dir / "metrics.jsonl", "w") as mf, open(run_dir / "epochs.csv", "w", newline="") as ef:
        epochs = csv.writer(ef)
        epochs.writerow(EPOCH_CSV_FIELDS)
        for epoch in range(cfg.epochs):
            opt.lr = lr_at(cfg, epoch)
            order = shuffle_rng.permutation(len(data))
            losses = []
            for b in range(0, len(order), cfg.batch_size):
                idx = np.sort(order[b : b + cfg.batch_size])
                x, targets = data.batch(idx)
                skips = sample_skips(probs, skip_rng) if probs is not None else None
                total, stage_losses, counts = training_loss(cfg, params, mcfg, x, targets, skips)
                loss = float(total.data)
                if not np.isfinite(loss):
                    _dump_divergence(run_dir, cfg, mcfg, params, epoch, opt, step, idx, stage_losses)
                    raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch})")
                if total.requires_grad:
                    total.backward()
                grad_norm = opt_step(params, opt)
                step += 1
                losses.append(loss)
                record = {
                    "step": step,
                    "epoch": epoch,
                    "loss": loss,
                    "stage_losses": stage_losses,
                    "supervision_counts": counts,
                    "lr": opt.lr,
                    "grad_norm": grad_norm,
                    "wall_time": round(time.perf_counter() - t0, 3),
                }
                mf.write(json.dumps(record) + "\n")
            mf.flush()
            save_checkpoint(ckpt_dir / f"epoch_{epoch + 1:03d}.qrck", make_checkpoint(cfg, mcfg, params, epoch + 1, opt))
            wall = time.perf_counter() - t0
            epochs.writerow([epoch + 1, step, f"{np.mean(losses):.6f}", opt.lr, f"{wall:.3f}"])
            ef.flush()
            if not quiet:
                log.info("%s epoch %d/%d loss %.4f (%.0fs)", cfg.strategy.label(), epoch + 1, cfg.epochs, np.mean(losses), wall)
    shutil.copyfile(ckpt_dir / f"epoch_{cfg.epochs:03d}.qrck", ckpt_dir / "final.qrck")
    wall = time.perf_counter() - t0
    (run_dir / "train_summary.json").write_text(json.dumps({"steps": step, "wall_time": wall}, indent=2) + "\n")
    return TrainResult(run_dir, params, mcfg, cfg, step, wall)


def _dump_divergence(run_dir, cfg, mcfg, params, epoch, opt, step, idx, stage_losses) -> None:
    save_checkpoint(run_dir / "diverged.qrck", make_checkpoint(cfg, mcfg, params, epoch, opt))
    info = {"step": step, "epoch": epoch, "batch_indices": [int(i) for i in idx], "stage_losses": stage_losses}
    (run_dir / "diverged.json").write_text(json.dumps(info, indent=2) + "\n")


# -- evaluation ---------------------------------------------------------------------

EVAL_CHUNK = 50


def stage_outputs(params: ParamStore, mcfg: ModelConfig, cfg: RunConfig, x: FeatureMap, depth: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """(probs (I, n, K+1), boxes (I, n, 4)) per evaluated stage.

    DQRR models, and any model given an explicit ``depth``, are evaluated by
    applying the final stage ``depth`` times; stochastic-depth models use
    calibrated residuals; everything else runs the basic pathway.
    """
    kind = cfg.strategy.kind
    if kind == "dqrr" or depth is not None:
        depth = depth or cfg.eval_depth or mcfg.num_stages
        qs = recurrent_infer(params, mcfg, x, depth)
        head_stages = [mcfg.num_stages] * depth
    else:
        scales = None
        if kind == "stochdepth":
            scales = [1.0 - p for p in cfg.strategy.removal_probs]
        qs = infer(params, mcfg, x, residual_scales=scales)
        head_stages = list(range(1, mcfg.num_stages + 1))
    out = []
    for s, q in zip(head_stages, qs):
        pr = predict_heads(s, q, params)
        out.append((softmax_np(pr.logits.data[:, 0]), pr.boxes.data[:, 0]))
    return out


def predict_split(params: ParamStore, mcfg: ModelConfig, cfg: RunConfig, split: Split, depth: int | None = None) -> list[StagePredictions]:
    preds = []
    for b in range(0, len(split), EVAL_CHUNK):
        idx = np.arange(b, min(b + EVAL_CHUNK, len(split)))
        x, _ = split.batch(idx)
        outs = stage_outputs(params, mcfg, cfg, x, depth)
        for k, i in enumerate(idx):
            scores = np.stack([p[k, :, :-1] for p, _ in outs])
            boxes = np.stack([bx[k] for _, bx in outs])
            preds.append(StagePredictions(int(split.seeds[i]), scores, boxes))
    return preds


def per_stage_ap(preds: list[StagePredictions], gts: list[GroundTruth], iou_thresh: float = 0.5) -> list[float]:
    if not preds:
        return []
    return [stage_ap(preds, gts, s, iou_thresh) for s in range(1, preds[0].num_stages + 1)]


def load_run(path: str | Path) -> tuple[RunConfig, ModelConfig, ParamStore]:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoints" / "final.qrck"
    return restore(load_checkpoint(path))


def check_stage_count(mcfg: ModelConfig, expected: int | None) -> None:
    if expected is not None and expected != mcfg.num_stages:
        raise ConfigError(f"checkpoint has {mcfg.num_stages} stages, config expects {expected}")

