"""Prediction-dump and ground-truth JSON-lines files.

Prediction dump, one line per image::

    {"version": 1, "image_id": 17,
     "stages": [{"stage": 1, "predictions": [{"query": 0, "scores": [...K], "box": [cx, cy, w, h]}, ...]},
                ...]}

``scores`` are per-class probabilities without the background column. The
query list must be the same at every stage (query ``i`` at stage ``s`` is
``P_i^s``). Ground-truth files use::

    {"version": 1, "image_id": 17, "boxes": [[cx, cy, w, h], ...], "labels": [...]}

Floats are written with ``repr`` precision, so a dump read back is
bit-identical to the arrays that produced it.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datagen import GroundTruth
from .diagnostics import StagePredictions
from .errors import SchemaError

DUMP_VERSION = 1
SUPPORTED_VERSIONS = (1,)


def _check_version(rec: dict, path, lineno: int) -> None:
    v = rec.get("version")
    if v not in SUPPORTED_VERSIONS:
        raise SchemaError(f"{path}:{lineno}: unsupported dump version {v!r} (supported: {SUPPORTED_VERSIONS})")


def _read_lines(path):
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: invalid JSON: {e}") from None
            if not isinstance(rec, dict):
                raise SchemaError(f"{path}:{lineno}: expected an object")
            _check_version(rec, path, lineno)
            yield lineno, rec


def write_predictions(path: str | Path, preds: list[StagePredictions]) -> None:
    with open(path, "w") as f:
        for p in preds:
            stages = []
            for s in range(p.num_stages):
                stages.append(
                    {
                        "stage": s + 1,
                        "predictions": [
                            {"query": q, "scores": p.scores[s, q].tolist(), "box": p.boxes[s, q].tolist()}
                            for q in range(p.scores.shape[1])
                        ],
                    }
                )
            f.write(json.dumps({"version": DUMP_VERSION, "image_id": p.image_id, "stages": stages}) + "\n")


def read_predictions(path: str | Path) -> list[StagePredictions]:
    out = []
    for lineno, rec in _read_lines(path):
        try:
            stages = sorted(rec["stages"], key=lambda st: st["stage"])
            queries = None
            scores, boxes = [], []
            for st in stages:
                ps = sorted(st["predictions"], key=lambda p: p["query"])
                ids = [p["query"] for p in ps]
                if queries is None:
                    queries = ids
                elif ids != queries:
                    raise SchemaError(f"{path}:{lineno}: query ids differ between stages")
                scores.append([p["scores"] for p in ps])
                boxes.append([p["box"] for p in ps])
            out.append(StagePredictions(int(rec["image_id"]), np.array(scores, dtype=np.float64), np.array(boxes, dtype=np.float64)))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, SchemaError):
                raise
            raise SchemaError(f"{path}:{lineno}: malformed prediction record: {e}") from None
    return out


def write_ground_truth(path: str | Path, image_ids, gts: list[GroundTruth]) -> None:
    with open(path, "w") as f:
        for i, g in zip(image_ids, gts, strict=True):
            rec = {"version": DUMP_VERSION, "image_id": int(i), "boxes": g.boxes.tolist(), "labels": g.labels.tolist()}
            f.write(json.dumps(rec) + "\n")


def read_ground_truth(path: str | Path) -> dict[int, GroundTruth]:
    out = {}
    for lineno, rec in _read_lines(path):
        try:
            out[int(rec["image_id"])] = GroundTruth(np.array(rec["boxes"], dtype=np.float64).reshape(-1, 4), rec["labels"])
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"{path}:{lineno}: malformed ground-truth record: {e}") from None
    return out


def align(preds: list[StagePredictions], gts: dict[int, GroundTruth]) -> list[GroundTruth]:
    """Ground truth in prediction order; every predicted image needs one."""
    missing = [p.image_id for p in preds if p.image_id not in gts]
    if missing:
        raise SchemaError(f"no ground truth for image ids {missing[:5]}")
    return [gts[p.image_id] for p in preds]
