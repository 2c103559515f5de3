"""Axis-aligned box arithmetic, IoU and greedy NMS.

Boxes are closed continuous rectangles ``(x1, y1, x2, y2)`` in pixels with no
+1 convention.  Array helpers take ``[N, 4]`` float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(f"degenerate box {tuple(self)}")

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def contains(self, other: "Box") -> bool:
        return self.x1 <= other.x1 and self.y1 <= other.y1 and self.x2 >= other.x2 and self.y2 >= other.y2

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise GeometryError(f"score {self.score} outside [0, 1]")


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def union_box(a: Box, b: Box) -> Box:
    return Box(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([tuple(b) for b in boxes], dtype=np.float64)


def areas(a: np.ndarray) -> np.ndarray:
    return (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between rows of ``a`` [N,4] and ``b`` [M,4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = areas(a)[:, None] + areas(b)[None, :] - inter
    return inter / union


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two equally long box arrays."""
    iw = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    return inter / (areas(a) + areas(b) - inter)


def union_boxes(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([np.minimum(a[:, :2], b[:, :2]), np.maximum(a[:, 2:], b[:, 2:])], axis=1)


def clamp_boxes(a: np.ndarray, width: float, height: float) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out


class NMSResult(NamedTuple):
    kept: list[int]
    assign: list[int]


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> NMSResult:
    """Greedy NMS over ``[N,4]`` boxes.

    Items are swept by descending score (ties: lower index first).  A kept
    item suppresses every not-yet-suppressed later item with IoU >= threshold
    and becomes its representative.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    n = len(scores)
    if n == 0:
        return NMSResult([], [])
    order = np.lexsort((np.arange(n), -np.asarray(scores, dtype=np.float64)))
    boxes = np.asarray(boxes, dtype=np.float64)[order]
    ar = areas(boxes)
    assign_sorted = np.full(n, -1, dtype=np.intp)
    kept = []
    for pos in range(n):
        if assign_sorted[pos] >= 0:
            continue
        assign_sorted[pos] = pos
        kept.append(pos)
        rest = np.flatnonzero(assign_sorted[pos + 1 :] < 0) + pos + 1
        if rest.size == 0:
            continue
        b = boxes[pos]
        r = boxes[rest]
        iw = np.minimum(b[2], r[:, 2]) - np.maximum(b[0], r[:, 0])
        ih = np.minimum(b[3], r[:, 3]) - np.maximum(b[1], r[:, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        ov = inter / (ar[pos] + ar[rest] - inter)
        assign_sorted[rest[ov >= threshold]] = pos
    assign = np.empty(n, dtype=np.intp)
    assign[order] = order[assign_sorted]
    return NMSResult([int(order[p]) for p in kept], assign.tolist())


def nms(items: Sequence[ScoredBox], threshold: float) -> NMSResult:
    """Greedy NMS returning kept indices (sweep order) and per-item representative."""
    if len(items) == 0:
        if not 0.0 < threshold < 1.0:
            raise ValueError(f"threshold {threshold} outside (0, 1)")
        return NMSResult([], [])
    return nms_arrays(boxes_to_array([it.box for it in items]), np.array([it.score for it in items]), threshold)
