"""Hungarian assignment and the per-set detection loss.

Each supervised query set is matched to the ground truth independently. The
assignment solver is the shortest-augmenting-path form of the Hungarian
method with row/column potentials, compiled with numba; a batch entry point
solves every (image, set) pair of a stage in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigError
from .geometry import giou_tensor, pairwise_iou, pairwise_l1
from .tensor import Tensor, cross_entropy, take

COST_WEIGHTS = (2.0, 5.0, 2.0)
BACKGROUND_COEF = 0.1


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    background: float = BACKGROUND_COEF


@numba.njit(cache=True)
def _assign_rows(a):
    # Rows <= columns. Returns the column assigned to each row.
    r, c = a.shape
    u = np.zeros(r + 1)
    v = np.zeros(c + 1)
    p = np.zeros(c + 1, dtype=np.int64)
    way = np.zeros(c + 1, dtype=np.int64)
    minv = np.empty(c + 1)
    used = np.empty(c + 1, dtype=np.bool_)
    for i in range(1, r + 1):
        p[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, c + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(c + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    out = np.full(r, -1, dtype=np.int64)
    for j in range(1, c + 1):
        if p[j] != 0:
            out[p[j] - 1] = j - 1
    return out


@numba.njit(cache=True)
def _assign_batch(costs, counts):
    # costs: (B, n, M) query x gt; counts: valid gt per entry.
    b_total, n, m_max = costs.shape
    out = np.full((b_total, m_max), -1, dtype=np.int64)
    for b in range(b_total):
        m = counts[b]
        if m == 0:
            continue
        sub = costs[b, :, :m]
        if m <= n:
            out[b, :m] = _assign_rows(np.ascontiguousarray(sub.T))
        else:
            q2g = _assign_rows(np.ascontiguousarray(sub))
            for q in range(n):
                out[b, q2g[q]] = q
    return out


def hungarian(costs: np.ndarray) -> dict[int, int]:
    """Minimum-cost one-to-one assignment for a (queries x ground truths) matrix.

    Returns a map ground-truth index -> query index. When there are more ground
    truths than queries, only ``n_queries`` ground truths are matched. Ties are
    broken toward the lowest column index in scan order.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-d")
    n, m = c.shape
    if m == 0 or n == 0:
        return {}
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    res = _assign_batch(c[None], np.array([m], dtype=np.int64))[0]
    return {j: int(q) for j, q in enumerate(res) if q >= 0}


def assignment_cost(costs: np.ndarray, assignment: dict[int, int]) -> float:
    return float(sum(costs[q, j] for j, q in sorted(assignment.items())))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def build_cost_matrix(
    probs: np.ndarray,
    boxes: np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    weights: tuple[float, float, float] = COST_WEIGHTS,
) -> np.ndarray:
    """cost[..., i, j] = -wc * p_i(label_j) + wl1 * L1(i, j) + wgiou * (1 - GIoU(i, j)).

    ``probs`` (..., n, K+1), ``boxes`` (..., n, 4), ``gt_boxes`` (..., m, 4),
    ``gt_labels`` (..., m). Leading axes broadcast.
    """
    wc, wl1, wg = weights
    labels = np.asarray(gt_labels, dtype=np.intp)
    cls_p = np.take_along_axis(probs, np.broadcast_to(labels[..., None, :], probs.shape[:-1] + labels.shape[-1:]), axis=-1)
    _, gious = pairwise_iou(boxes, gt_boxes, with_giou=True)
    return -wc * cls_p + wl1 * pairwise_l1(boxes, gt_boxes) + wg * (1.0 - gious)


@dataclass
class TargetBatch:
    """Ground truth for a batch of images, padded to a common count."""

    boxes: np.ndarray  # (I, M, 4)
    labels: np.ndarray  # (I, M)
    counts: np.ndarray  # (I,)

    @classmethod
    def from_list(cls, gts) -> TargetBatch:
        m = max(1, max((len(g) for g in gts), default=0))
        boxes = np.full((len(gts), m, 4), 0.5)
        labels = np.zeros((len(gts), m), dtype=np.int64)
        for i, g in enumerate(gts):
            boxes[i, : len(g)] = g.boxes
            labels[i, : len(g)] = g.labels
        return cls(boxes, labels, np.array([len(g) for g in gts], dtype=np.int64))

    def __len__(self) -> int:
        return len(self.counts)


def match_sets(
    logits: np.ndarray, boxes: np.ndarray, targets: TargetBatch, weights: tuple[float, float, float] = COST_WEIGHTS
) -> np.ndarray:
    """Match every (image, set) pair independently.

    ``logits``/``boxes`` are (I, G, n, .). Returns (I, G, M) query indices per
    ground truth, -1 where padded.
    """
    i_count, g_count, n = logits.shape[:3]
    costs = build_cost_matrix(
        softmax_np(logits), boxes, targets.boxes[:, None], targets.labels[:, None], weights
    )
    flat = np.ascontiguousarray(costs.reshape(i_count * g_count, n, -1))
    counts = np.repeat(targets.counts, g_count)
    return _assign_batch(flat, counts).reshape(i_count, g_count, -1)


@dataclass
class LossBreakdown:
    """Loss components for the sets supervised at one or more stages.

    ``classification``, ``box_l1`` and ``giou`` are per-set values (already
    multiplied by their weights, averaged over images); ``stage_totals`` maps
    stage -> summed loss; ``total`` is the differentiable grand total.
    """

    classification: list[float] = field(default_factory=list)
    box_l1: list[float] = field(default_factory=list)
    giou: list[float] = field(default_factory=list)
    stages: list[int] = field(default_factory=list)
    stage_totals: dict[int, float] = field(default_factory=dict)
    total: Tensor | None = None

    @property
    def grand_total(self) -> float:
        return float(self.total.data) if self.total is not None else 0.0


def set_losses(
    logits: Tensor,
    boxes: Tensor,
    targets: TargetBatch,
    match: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> tuple[Tensor, Tensor, Tensor]:
    """Per-set loss components, each a Tensor of shape (G,).

    ``logits`` (I, G, n, K+1) and ``boxes`` (I, G, n, 4); ``match`` (I, G, M)
    from :func:`match_sets`. Matched queries pay cross-entropy on the true
    label plus L1 and 1-GIoU; unmatched ones pay background cross-entropy
    scaled by ``weights.background``. Each set's sum is divided by the number
    of ground truths (at least 1) and averaged over images.
    """
    i_count, g_count, n, c = logits.shape
    bg = c - 1
    ii, gg, jj = np.nonzero(match >= 0)
    qq = match[ii, gg, jj]
    cls_target = np.full((i_count, g_count, n), bg, dtype=np.intp)
    cls_target[ii, gg, qq] = targets.labels[ii, jj]
    cls_weight = np.full((i_count, g_count, n), weights.background)
    cls_weight[ii, gg, qq] = 1.0
    norm = np.maximum(targets.counts, 1).astype(np.float64)
    # Per (image, set) scale: divide by gt count, average over images.
    scale = (1.0 / (norm * i_count))[:, None]  # (I, 1)

    ce = cross_entropy(logits, cls_target)  # (I, G, n)
    cls_w = cls_weight * (weights.cls * scale)[:, :, None]
    cls_per_set = (ce * cls_w).sum(axis=(0, 2))

    if len(qq) == 0:
        zero = (boxes * 0.0).sum(axis=(0, 2, 3))
        return cls_per_set, zero, zero
    flat_idx = (ii * g_count + gg) * n + qq
    matched = take(boxes.reshape(i_count * g_count * n, 4), flat_idx, axis=0)  # (P, 4)
    tgt = targets.boxes[ii, jj]
    pair_scale = scale[ii, 0]
    seg = np.zeros((g_count, len(qq)))
    seg[gg, np.arange(len(qq))] = 1.0
    seg_t = Tensor(seg)
    l1 = (matched - tgt).abs().sum(axis=-1) * (weights.l1 * pair_scale)
    gi = (1.0 - giou_tensor(matched, tgt)) * (weights.giou * pair_scale)
    l1_per_set = (seg_t @ l1.reshape(-1, 1)).reshape(g_count)
    giou_per_set = (seg_t @ gi.reshape(-1, 1)).reshape(g_count)
    return cls_per_set, l1_per_set, giou_per_set


def stage_weights(kind: str, num_stages: int, reweight: tuple[float, ...] | None = None) -> np.ndarray:
    """Multiplier applied to each stage's summed set losses."""
    if kind != "reweight":
        return np.ones(num_stages)
    if reweight is None or len(reweight) != num_stages:
        raise ConfigError(f"reweight needs {num_stages} weights, got {reweight!r}")
    return np.asarray(reweight, dtype=np.float64)


def aggregate_losses(per_stage: dict[int, Tensor], kind: str, num_stages: int, reweight=None) -> Tensor:
    """Sum per-stage losses, applying stage multipliers for re-weighting.

    ``per_stage`` maps stage -> (G,) Tensor of per-set losses.
    """
    w = stage_weights(kind, num_stages, reweight)
    total = None
    for s in sorted(per_stage):
        term = per_stage[s].sum()
        if w[s - 1] != 1.0:
            term = term * w[s - 1]
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)
