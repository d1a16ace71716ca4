"""Axis-aligned boxes in normalized center form, plus the overlap and
distance measures everything else is built on.

- BBox: (cx, cy, w, h) as fractions of the image; corner form is derived.
- iou / area / l1_box_distance: the primitives used by matching costs,
  regression losses, and detection metrics.
- Prediction / GroundTruthBox: scored detector output and annotation target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple


@dataclass(frozen=True)
class BBox:
    """Box in normalized center form. All fields are fractions of image size."""

    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> Tuple[float, float, float, float]:
        """(x1, y1, x2, y2) corner view; x1 <= x2 and y1 <= y2 for w, h > 0."""
        half_w = self.w / 2.0
        half_h = self.h / 2.0
        return (self.cx - half_w, self.cy - half_h, self.cx + half_w, self.cy + half_h)


def bbox_from_corners(x1: float, y1: float, x2: float, y2: float) -> BBox:
    return BBox(cx=(x1 + x2) / 2.0, cy=(y1 + y2) / 2.0, w=x2 - x1, h=y2 - y1)


@dataclass(frozen=True)
class Prediction:
    """Scored detector output: one box plus its table-confidence in [0, 1]."""

    box: BBox
    score: float


@dataclass(frozen=True)
class GroundTruthBox:
    """Annotation target. `source_index` is set on replicas to point back to
    the original target they were copied from."""

    box: BBox
    source_index: Optional[int] = None


def _require_positive_area(b: BBox, name: str) -> None:
    if b.w <= 0.0 or b.h <= 0.0:
        raise ValueError(f"degenerate box {name}: w={b.w}, h={b.h} (both must be > 0)")


def area(b: BBox) -> float:
    """Fraction of image area covered by the box."""
    _require_positive_area(b, "b")
    return b.w * b.h


def intersection_area(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union in [0, 1]. Symmetric. Degenerate boxes are an
    error rather than 0 so data bugs surface instead of vanishing."""
    _require_positive_area(a, "a")
    _require_positive_area(b, "b")
    inter = intersection_area(a, b)
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def l1_box_distance(a: BBox, b: BBox) -> float:
    """|dcx| + |dcy| + |dw| + |dh| in normalized units."""
    return (
        abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)
    )
