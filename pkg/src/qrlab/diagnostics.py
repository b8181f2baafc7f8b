"""Stage-wise evaluation of query chains.

Every query ``i`` yields one prediction per stage, ``P_i^1 .. P_i^S``. A
prediction's score is its highest non-background class probability and its
class is the matching argmax. On top of per-stage AP this module measures
how often the final stage is worse than an earlier member of its own chain:

* TP fading: the final prediction is a true positive for ground truth G, but
  an earlier stage was a true positive for the same G with strictly higher
  IoU and strictly higher score.
* FP exacerbation: the final prediction is a false positive and an earlier
  stage was a false positive with strictly lower score.

Earlier chain members are judged with the same verdict rule as the final
stage, applied to that stage's predictions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import GroundTruth
from .geometry import pairwise_iou

SCORE_FLOOR = 0.05
AP_RECALL_POINTS = np.linspace(0.0, 1.0, 101)

TP, FP, IGNORED = 1, 0, -1


@dataclass
class StagePredictions:
    """Predictions of one image: class probabilities (S, n, K) without the
    background column, and boxes (S, n, 4)."""

    image_id: int
    scores: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.scores.ndim != 3 or self.boxes.shape != self.scores.shape[:2] + (4,):
            raise ValueError(f"bad prediction shapes {self.scores.shape} / {self.boxes.shape}")

    @property
    def num_stages(self) -> int:
        return self.scores.shape[0]

    def score(self, s: int) -> np.ndarray:
        """Final score of each query at 1-based stage ``s``."""
        return self.scores[s - 1].max(axis=-1)

    def label(self, s: int) -> np.ndarray:
        return self.scores[s - 1].argmax(axis=-1)


@dataclass
class TPVerdict:
    """Per-query verdicts at one stage: status (TP / FP / IGNORED), the ground
    truth a TP is assigned to (-1 otherwise), its IoU with that ground truth
    and the prediction score."""

    status: np.ndarray
    gt: np.ndarray
    iou: np.ndarray
    score: np.ndarray


def classify(scores: np.ndarray, labels: np.ndarray, boxes: np.ndarray, gt: GroundTruth, iou_thresh: float, floor: float = SCORE_FLOOR) -> TPVerdict:
    """Verdicts for one set of predictions against one image's ground truth.

    A prediction is a TP toward G if IoU > ``iou_thresh``, the class matches
    and its score is the highest among predictions meeting both conditions
    (ties go to the lower query index). A prediction that wins several
    ground truths keeps the one it overlaps most. Everything else is an FP
    when its score reaches ``floor`` and ignored otherwise.
    """
    n = len(scores)
    status = np.where(scores >= floor, FP, IGNORED)
    assigned = np.full(n, -1)
    best_iou = np.zeros(n)
    if len(gt) and n:
        ious = pairwise_iou(boxes, gt.boxes)
        eligible = (ious > iou_thresh) & (labels[:, None] == gt.labels[None, :])
        wins: dict[int, list[int]] = {}
        for j in range(len(gt)):
            cand = np.flatnonzero(eligible[:, j])
            if len(cand):
                top = cand[np.argmax(scores[cand])]
                wins.setdefault(int(top), []).append(j)
        for q, js in wins.items():
            j = max(js, key=lambda j: (ious[q, j], -j))
            status[q] = TP
            assigned[q] = j
            best_iou[q] = ious[q, j]
    return TPVerdict(status, assigned, best_iou, np.asarray(scores, dtype=np.float64))


def stage_verdict(pred: StagePredictions, gt: GroundTruth, s: int, iou_thresh: float) -> TPVerdict:
    return classify(pred.score(s), pred.label(s), pred.boxes[s - 1], gt, iou_thresh)


def classify_final(pred: StagePredictions, gt: GroundTruth, iou_thresh: float = 0.5) -> TPVerdict:
    return stage_verdict(pred, gt, pred.num_stages, iou_thresh)


def _chain_triggers(pred: StagePredictions, gt: GroundTruth, iou_thresh: float, stages) -> tuple[list, list]:
    """For each final TP / FP, the list of earlier (stage, iou, score)
    members that trigger fading / exacerbation."""
    final = classify_final(pred, gt, iou_thresh)
    earlier = {s: stage_verdict(pred, gt, s, iou_thresh) for s in stages}
    tps, fps = [], []
    for q in range(len(final.status)):
        if final.status[q] == TP:
            hits = [
                (s, v.iou[q], v.score[q])
                for s, v in earlier.items()
                if v.status[q] == TP and v.gt[q] == final.gt[q] and v.iou[q] > final.iou[q] and v.score[q] > final.score[q]
            ]
            tps.append((q, hits))
        elif final.status[q] == FP:
            hits = [(s, v.iou[q], v.score[q]) for s, v in earlier.items() if v.status[q] == FP and v.score[q] < final.score[q]]
            fps.append((q, hits))
    return tps, fps


def _check_stages(preds: list[StagePredictions], stages) -> list[int]:
    if not preds:
        return []
    last = preds[0].num_stages
    stages = list(range(1, last)) if stages is None else sorted(set(stages))
    if any(not 1 <= s < last for s in stages):
        raise ValueError(f"attribution stages must lie in 1..{last - 1}")
    return stages


def stage_attribution(preds: list[StagePredictions], gts: list[GroundTruth], iou_thresh: float = 0.5, stages=None) -> tuple[float | None, float | None]:
    """(TP fading rate, FP exacerbation rate) with the chain search limited
    to ``stages`` (default: every stage before the last). A rate with an
    empty denominator is ``None``."""
    stages = _check_stages(preds, stages)
    tp_total = tp_hit = fp_total = fp_hit = 0
    for pred, gt in zip(preds, gts, strict=True):
        tps, fps = _chain_triggers(pred, gt, iou_thresh, stages)
        tp_total += len(tps)
        tp_hit += sum(1 for _, h in tps if h)
        fp_total += len(fps)
        fp_hit += sum(1 for _, h in fps if h)
    return (tp_hit / tp_total if tp_total else None, fp_hit / fp_total if fp_total else None)


def tp_fading_rate(preds: list[StagePredictions], gts: list[GroundTruth], iou_thresh: float = 0.5) -> float | None:
    return stage_attribution(preds, gts, iou_thresh)[0]


def fp_exacerbation_rate(preds: list[StagePredictions], gts: list[GroundTruth], iou_thresh: float = 0.5) -> float | None:
    return stage_attribution(preds, gts, iou_thresh)[1]


def average_precision(
    scores: list[np.ndarray],
    labels: list[np.ndarray],
    boxes: list[np.ndarray],
    gts: list[GroundTruth],
    iou_thresh: float = 0.5,
    num_classes: int | None = None,
) -> float:
    """Class-averaged AP with 101-point interpolated precision.

    Inputs are per image: detection scores (n,), class ids (n,), boxes (n, 4).
    Within a class, detections are visited highest score first (ties by image
    then query order) and each takes the unmatched ground truth with the
    largest IoU, counting as a hit when that IoU is >= ``iou_thresh``.
    Classes without ground truth are left out of the average.
    """
    if num_classes is None:
        seen = [l for l in labels if len(l)] + [g.labels for g in gts if len(g)]
        num_classes = int(max((int(a.max()) for a in seen), default=-1)) + 1
    aps = []
    for c in range(num_classes):
        n_gt = sum(int((g.labels == c).sum()) for g in gts)
        if n_gt == 0:
            continue
        dets = []
        for img, (sc, lb) in enumerate(zip(scores, labels, strict=True)):
            for q in np.flatnonzero(lb == c):
                dets.append((-float(sc[q]), img, int(q)))
        if not dets:
            aps.append(0.0)
            continue
        dets.sort()
        taken = {img: np.zeros(len(g), dtype=bool) for img, g in enumerate(gts)}
        hits = np.zeros(len(dets))
        for k, (_, img, q) in enumerate(dets):
            g = gts[img]
            mask = (g.labels == c) & ~taken[img]
            if not mask.any():
                continue
            ious = pairwise_iou(boxes[img][q : q + 1], g.boxes)[0]
            ious = np.where(mask, ious, -1.0)
            j = int(np.argmax(ious))
            if ious[j] >= iou_thresh:
                taken[img][j] = True
                hits[k] = 1.0
        tp = np.cumsum(hits)
        recall = tp / n_gt
        precision = tp / np.arange(1, len(dets) + 1)
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, AP_RECALL_POINTS, side="left")
        sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
        aps.append(float(sampled.mean()))
    return float(np.mean(aps)) if aps else 0.0


def stage_ap(preds: list[StagePredictions], gts: list[GroundTruth], s: int, iou_thresh: float = 0.5, num_classes: int | None = None) -> float:
    return average_precision(
        [p.score(s) for p in preds], [p.label(s) for p in preds], [p.boxes[s - 1] for p in preds], gts, iou_thresh,
        num_classes if num_classes is not None else (preds[0].scores.shape[-1] if preds else None),
    )


def oracle_replacement_ap(preds: list[StagePredictions], gts: list[GroundTruth], iou_thresh: float = 0.5) -> float:
    """Final-stage AP after swapping each triggered final prediction for its
    best chain member: for a fading TP the member with the highest IoU
    (score breaks ties), for an exacerbated FP the lowest-scored FP member."""
    scores, labels, boxes = [], [], []
    for pred, gt in zip(preds, gts, strict=True):
        last = pred.num_stages
        sc, lb, bx = pred.score(last).copy(), pred.label(last).copy(), pred.boxes[last - 1].copy()
        tps, fps = _chain_triggers(pred, gt, iou_thresh, range(1, last))
        for q, hits in tps:
            if hits:
                s = max(hits, key=lambda h: (h[1], h[2], -h[0]))[0]
                sc[q], lb[q], bx[q] = pred.score(s)[q], pred.label(s)[q], pred.boxes[s - 1, q]
        for q, hits in fps:
            if hits:
                s = min(hits, key=lambda h: (h[2], h[0]))[0]
                sc[q], lb[q], bx[q] = pred.score(s)[q], pred.label(s)[q], pred.boxes[s - 1, q]
        scores.append(sc)
        labels.append(lb)
        boxes.append(bx)
    k = preds[0].scores.shape[-1] if preds else None
    return average_precision(scores, labels, boxes, gts, iou_thresh, k)


def attribution_subsets(num_stages: int) -> list[tuple[int, ...]]:
    """Single earlier stages, then the early block and every suffix ending at S-1."""
    last = num_stages - 1
    singles = [(s,) for s in range(1, last + 1)]
    blocks = []
    if last >= 3:
        blocks.append(tuple(range(1, last - 1)))
    for k in range(last - 1, 0, -1):
        blocks.append(tuple(range(k, last + 1)))
    return singles + [b for b in blocks if b not in singles]


@dataclass
class DiagnosticsReport:
    iou_thresh: float
    stage_ap: list[float]
    final_ap: float
    tp_fading_rate: float | None
    fp_exacerbation_rate: float | None
    attribution: list[dict] = field(default_factory=list)
    oracle_ap: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def oracle_holds(self) -> bool:
        return self.oracle_ap >= self.final_ap


def diagnose(preds: list[StagePredictions], gts: list[GroundTruth], iou_thresh: float = 0.5) -> DiagnosticsReport:
    if not preds:
        return DiagnosticsReport(iou_thresh, [], 0.0, None, None, [], 0.0)
    s_count = preds[0].num_stages
    aps = [stage_ap(preds, gts, s, iou_thresh) for s in range(1, s_count + 1)]
    tp, fp = stage_attribution(preds, gts, iou_thresh)
    rows = []
    if s_count > 1:
        for subset in attribution_subsets(s_count):
            t, f = stage_attribution(preds, gts, iou_thresh, subset)
            rows.append({"stages": list(subset), "tp_fading_rate": t, "fp_exacerbation_rate": f})
    return DiagnosticsReport(iou_thresh, aps, aps[-1], tp, fp, rows, oracle_replacement_ap(preds, gts, iou_thresh))
