"""Boxes, IoU, aspect-ratio policies and greedy non-maximum suppression.

Boxes are continuous half-open rectangles: area is ``(x2 - x1) * (y2 - y1)``
with no +1 pixel convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

DEFAULT_ASPECT_RATIO = 0.41


@dataclass(frozen=True)
class BoundBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ObjectAnnotation:
    cx: float
    cy: float
    h: float
    w: float
    ignore: bool = False

    def __post_init__(self):
        if not (self.h > 0 and self.w > 0):
            raise ValueError(f"annotation needs h > 0 and w > 0, got h={self.h} w={self.w}")

    @property
    def box(self) -> BoundBox:
        return BoundBox(self.cx - self.w / 2, self.cy - self.h / 2,
                        self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.h * self.w

    @classmethod
    def from_box(cls, box: BoundBox, ignore: bool = False) -> "ObjectAnnotation":
        cx, cy = box.center
        return cls(cx, cy, box.height, box.width, ignore)

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "h": self.h, "w": self.w, "ignore": self.ignore}


@dataclass(frozen=True)
class Detection:
    box: BoundBox
    score: float
    cell: tuple[int, int] = (-1, -1)

    def __post_init__(self):
        if not 0.0 < self.score <= 1.0:
            raise ValueError(f"detection score must lie in (0, 1], got {self.score}")

    def to_dict(self) -> dict:
        b = self.box
        return {"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "score": self.score}


@dataclass(frozen=True)
class AspectPolicy:
    """``fixed`` derives width as ``ar * h``; ``free`` takes a predicted width."""

    mode: str = "fixed"
    ar: float = DEFAULT_ASPECT_RATIO

    def __post_init__(self):
        if self.mode not in ("fixed", "free"):
            raise ValueError(f"aspect mode must be 'fixed' or 'free', got {self.mode!r}")
        if self.mode == "fixed" and not self.ar > 0:
            raise ValueError(f"aspect ratio must be positive, got {self.ar}")


def box_from_center_scale(cx: float, cy: float, h: float, w: Optional[float] = None,
                          policy: AspectPolicy = AspectPolicy()) -> BoundBox:
    if not h > 0:
        raise ValueError(f"height must be positive, got {h}")
    if policy.mode == "fixed":
        w = policy.ar * h
    elif w is None:
        raise ValueError("free aspect policy needs an explicit width")
    elif not w > 0:
        raise ValueError(f"width must be positive, got {w}")
    return BoundBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def iou(a: BoundBox, b: BoundBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Sequence[BoundBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) arrays of x1, y1, x2, y2."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def clip_box(box: BoundBox, width: float, height: float) -> Optional[BoundBox]:
    """Intersect ``box`` with the image rectangle; ``None`` when nothing is left."""
    if not (width > 0 and height > 0):
        raise ValueError(f"image size must be positive, got {width}x{height}")
    x1, y1 = max(box.x1, 0.0), max(box.y1, 0.0)
    x2, y2 = min(box.x2, float(width)), min(box.y2, float(height))
    if x2 <= x1 or y2 <= y1:
        return None
    if (x1, y1, x2, y2) == box.as_tuple():
        return box
    return BoundBox(x1, y1, x2, y2)


def stable_score_order(scores) -> np.ndarray:
    """Indices sorting scores descending; equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms(dets: Sequence[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy NMS: keep the best box, drop everything with IoU >= ``iou_thresh`` to it."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    if not dets:
        return []
    order = stable_score_order([d.score for d in dets])
    boxes = boxes_to_array([d.box for d in dets])[order]
    ious = iou_matrix(boxes, boxes)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(dets[order[i]])
        alive[i + 1:] &= ious[i, i + 1:] < iou_thresh
    return keep
