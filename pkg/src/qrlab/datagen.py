"""Synthetic detection scenes rendered onto a coarse feature grid.

Each scene holds 2..8 labelled boxes. Rendering paints, for every cell, the
fraction of the cell covered by each class (one channel per class), two
positional channels with the cell center, a total-coverage channel that
exposes overlaps, and one channel of pure noise. Gaussian noise is added to
every non-positional channel.

Everything is a pure function of ``(base_seed, split, index)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import SchemaError
from .geometry import BBox, pairwise_iou

ARCHIVE_VERSION = 1
SPLIT_IDS = {"train": 0, "val": 1, "test": 2}
DEFAULT_SIZES = {"train": 2000, "val": 200}


@dataclass(frozen=True)
class SceneParams:
    num_classes: int = 4
    grid: int = 16
    min_objects: int = 2
    max_objects: int = 8
    min_side: float = 0.05
    max_side: float = 0.35
    max_pair_iou: float = 0.7
    noise_sigma: float = 0.1

    @property
    def channels(self) -> int:
        return self.num_classes + 4


@dataclass
class GroundTruth:
    boxes: np.ndarray  # (m, 4) cx, cy, w, h
    labels: np.ndarray  # (m,) int

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def bboxes(self) -> list[BBox]:
        return [BBox.from_array(b) for b in self.boxes]


@dataclass
class Scene:
    seed: int
    gt: GroundTruth


@dataclass
class RenderedSample:
    seed: int
    features: np.ndarray  # (grid, grid, channels)
    gt: GroundTruth


def generate_scene(seed: int, params: SceneParams = SceneParams()) -> Scene:
    rng = np.random.default_rng(seed)
    count = int(rng.integers(params.min_objects, params.max_objects + 1))
    boxes: list[np.ndarray] = []
    labels: list[int] = []
    while len(boxes) < count:
        w, h = rng.uniform(params.min_side, params.max_side, size=2)
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        cand = np.array([cx, cy, w, h])
        if boxes and pairwise_iou(cand[None], np.stack(boxes)).max() > params.max_pair_iou:
            continue
        boxes.append(cand)
        labels.append(int(rng.integers(params.num_classes)))
    return Scene(seed, GroundTruth(np.stack(boxes), np.array(labels)))


def cell_coverage(box: np.ndarray, grid: int) -> np.ndarray:
    """Fraction of each grid cell (rows = y, cols = x) covered by ``box``."""
    edges = np.linspace(0.0, 1.0, grid + 1)
    x1, x2 = box[0] - box[2] / 2, box[0] + box[2] / 2
    y1, y2 = box[1] - box[3] / 2, box[1] + box[3] / 2
    ox = np.clip(np.minimum(edges[1:], x2) - np.maximum(edges[:-1], x1), 0.0, None) * grid
    oy = np.clip(np.minimum(edges[1:], y2) - np.maximum(edges[:-1], y1), 0.0, None) * grid
    return oy[:, None] * ox[None, :]


def cell_centers(grid: int) -> np.ndarray:
    """(grid*grid, 2) cell centers (x, y) in row-major cell order."""
    c = (np.arange(grid) + 0.5) / grid
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.reshape(-1), yy.reshape(-1)], axis=-1)


def render(scene: Scene, params: SceneParams = SceneParams(), noise: bool = True) -> RenderedSample:
    g, k = params.grid, params.num_classes
    feats = np.zeros((g, g, params.channels))
    for box, label in zip(scene.gt.boxes, scene.gt.labels):
        cov = cell_coverage(box, g)
        feats[:, :, label] = np.maximum(feats[:, :, label], cov)
        feats[:, :, k + 2] += cov
    centers = cell_centers(g).reshape(g, g, 2)
    feats[:, :, k : k + 2] = centers
    if noise and params.noise_sigma > 0:
        rng = np.random.default_rng([scene.seed, 0x5EED])
        noisy = [c for c in range(params.channels) if c not in (k, k + 1)]
        feats[:, :, noisy] += rng.normal(0.0, params.noise_sigma, size=(g, g, len(noisy)))
    return RenderedSample(scene.seed, feats, scene.gt)


def sample_seed(base_seed: int, split: str, index: int) -> int:
    if split not in SPLIT_IDS:
        raise ValueError(f"unknown split {split!r}")
    words = np.random.SeedSequence([base_seed, SPLIT_IDS[split], index]).generate_state(2, dtype=np.uint32)
    low = (int(words[0]) << 32 | int(words[1])) & ((1 << 60) - 1)
    # The split id occupies the top bits, so seed sets of different splits are disjoint.
    return (SPLIT_IDS[split] << 60) | low


def dataset(split: str, size: int | None = None, base_seed: int = 0, params: SceneParams = SceneParams()) -> Iterator[RenderedSample]:
    size = DEFAULT_SIZES.get(split, 200) if size is None else size
    for i in range(size):
        yield render(generate_scene(sample_seed(base_seed, split, i), params), params)


# -- archive format --------------------------------------------------------


def save_archive(path: str | Path, samples: list[RenderedSample], params: SceneParams) -> None:
    """Write samples to a ``.npz`` archive.

    Layout: ``header`` (JSON string: format, version, grid shape, scene
    parameters), ``seeds`` (N,), ``features`` (N, H, W, C) float64,
    ``counts`` (N,), ``boxes`` (sum counts, 4), ``labels`` (sum counts,).
    """
    header = {
        "format": "qrlab-samples",
        "version": ARCHIVE_VERSION,
        "grid_shape": [params.grid, params.grid, params.channels],
        "scene_params": params.__dict__,
    }
    np.savez(
        path,
        header=np.array(json.dumps(header, sort_keys=True)),
        seeds=np.array([s.seed for s in samples], dtype=np.int64),
        features=np.stack([s.features for s in samples]).astype("<f8"),
        counts=np.array([len(s.gt) for s in samples], dtype=np.int64),
        boxes=np.concatenate([s.gt.boxes for s in samples]).astype("<f8"),
        labels=np.concatenate([s.gt.labels for s in samples]).astype(np.int64),
    )


def load_archive(path: str | Path) -> tuple[list[RenderedSample], SceneParams]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "qrlab-samples" or header.get("version") != ARCHIVE_VERSION:
            raise SchemaError(f"unsupported sample archive: {header.get('format')} v{header.get('version')}")
        params = SceneParams(**header["scene_params"])
        offsets = np.concatenate([[0], np.cumsum(z["counts"])])
        samples = [
            RenderedSample(
                int(seed),
                z["features"][i],
                GroundTruth(z["boxes"][offsets[i] : offsets[i + 1]], z["labels"][offsets[i] : offsets[i + 1]]),
            )
            for i, seed in enumerate(z["seeds"])
        ]
    return samples, params
