"""Axis-aligned boxes in normalized center-size form and their overlap metrics.

Boxes are ``(cx, cy, w, h)``. Corner form only appears inside the overlap
computations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, maximum, minimum

EPS = 1e-12


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size: {self}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> BBox:
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_array(cls, a) -> BBox:
        return cls(*(float(v) for v in a))


def _overlap(a: BBox, b: BBox) -> tuple[float, float, tuple[float, float, float, float], tuple[float, float, float, float]]:
    ca, cb = a.corners(), b.corners()
    iw = max(0.0, min(ca[2], cb[2]) - max(ca[0], cb[0]))
    ih = max(0.0, min(ca[3], cb[3]) - max(ca[1], cb[1]))
    inter = iw * ih
    # Areas from corners, like the intersection, so a box meets itself with IoU exactly 1.
    area_a = (ca[2] - ca[0]) * (ca[3] - ca[1])
    area_b = (cb[2] - cb[0]) * (cb[3] - cb[1])
    union = area_a + area_b - inter
    return inter, union, ca, cb


def iou(a: BBox, b: BBox) -> float:
    inter, union, _, _ = _overlap(a, b)
    if union <= EPS:
        return 0.0
    return min(1.0, inter / union)


def giou(a: BBox, b: BBox) -> float:
    inter, union, ca, cb = _overlap(a, b)
    hull = (max(ca[2], cb[2]) - min(ca[0], cb[0])) * (max(ca[3], cb[3]) - min(ca[1], cb[1]))
    i = min(1.0, inter / union) if union > EPS else 0.0
    if hull <= EPS:
        return i
    return i - max(0.0, hull - union) / hull


def box_l1(a: BBox, b: BBox) -> float:
    return abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)


# -- vectorized (numpy) ---------------------------------------------------


def to_corners(boxes: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def pairwise_iou(a: np.ndarray, b: np.ndarray, with_giou: bool = False):
    """IoU between every box of ``a`` (..., N, 4) and ``b`` (..., M, 4).

    Returns (..., N, M); with ``with_giou`` also returns the GIoU matrix.
    """
    ca = to_corners(a)[..., :, None, :]
    cb = to_corners(b)[..., None, :, :]
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    union = area_a + area_b - inter
    ious = np.where(union > EPS, np.minimum(inter / np.maximum(union, EPS), 1.0), 0.0)
    if not with_giou:
        return ious
    hw = np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0])
    hh = np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1])
    hull = hw * hh
    gious = np.where(hull > EPS, ious - np.maximum(hull - union, 0.0) / np.maximum(hull, EPS), ious)
    return ious, gious


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a[..., :, None, :] - b[..., None, :, :]).sum(axis=-1)


# -- differentiable ------------------------------------------------------


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise GIoU between predicted boxes (..., 4) and fixed targets."""
    px1 = pred[..., 0] - pred[..., 2] * 0.5
    py1 = pred[..., 1] - pred[..., 3] * 0.5
    px2 = pred[..., 0] + pred[..., 2] * 0.5
    py2 = pred[..., 1] + pred[..., 3] * 0.5
    tc = to_corners(target)
    tx1, ty1, tx2, ty2 = tc[..., 0], tc[..., 1], tc[..., 2], tc[..., 3]
    iw = (minimum(px2, tx2) - maximum(px1, tx1)).clamp(0.0, None)
    ih = (minimum(py2, ty2) - maximum(py1, ty1)).clamp(0.0, None)
    inter = iw * ih
    area_p = pred[..., 2] * pred[..., 3]
    area_t = target[..., 2] * target[..., 3]
    union = area_p + area_t - inter
    ious = inter / (union + EPS)
    hull = (maximum(px2, tx2) - minimum(px1, tx1)) * (maximum(py2, ty2) - minimum(py1, ty1))
    return ious - (hull - union) / (hull + EPS)
