"""Teacher-output filtering into pseudo-labels, plus NMS and duplicate
diagnostics used by the strategy ablations.

nms() keeps a process-wide call counter so training paths that must stay
suppression-free can be checked by instrumentation rather than by reading
the code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from .geometry import GroundTruthBox, Prediction, iou

_NMS_CALLS = 0


def nms_call_count() -> int:
    return _NMS_CALLS


def reset_nms_call_count() -> None:
    global _NMS_CALLS
    _NMS_CALLS = 0


@dataclass(frozen=True)
class FilterConfig:
    """Confidence threshold for promoting teacher predictions to labels."""

    tau: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


@dataclass(frozen=True)
class PseudoLabelSet:
    """Kept teacher boxes promoted to targets, with their source scores."""

    boxes: Tuple[GroundTruthBox, ...]
    source_scores: Tuple[float, ...]

    def __len__(self) -> int:
        return len(self.boxes)


def filter_pseudo_labels(
    teacher_preds: Sequence[Prediction], cfg: FilterConfig = FilterConfig()
) -> PseudoLabelSet:
    """Keep predictions with score strictly above tau, in input order.

    Boxes are taken verbatim from the teacher; no refinement or averaging.
    """
    boxes: List[GroundTruthBox] = []
    scores: List[float] = []
    for p in teacher_preds:
        if p.score > cfg.tau:
            boxes.append(GroundTruthBox(box=p.box))
            scores.append(p.score)
    return PseudoLabelSet(boxes=tuple(boxes), source_scores=tuple(scores))


def nms(preds: Sequence[Prediction], iou_threshold: float) -> List[Prediction]:
    """Greedy score-descending suppression.

    Keeps the highest-scoring prediction, drops anything overlapping a kept
    one with IoU strictly above the threshold. Output is sorted by
    descending score (stable for equal scores).
    """
    global _NMS_CALLS
    _NMS_CALLS += 1
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou threshold must lie in (0, 1), got {iou_threshold}")
    ranked = sorted(preds, key=lambda p: -p.score)
    kept: List[Prediction] = []
    for candidate in ranked:
        if all(iou(candidate.box, k.box) <= iou_threshold for k in kept):
            kept.append(candidate)
    return kept


def duplicate_rate(
    preds: Sequence[Prediction],
    gts: Sequence[GroundTruthBox],
    score_threshold: float,
    iou_threshold: float,
) -> float:
    """Mean count, per ground truth, of confident predictions overlapping it.

    A value near 1 means one confident hit per object; values above 1
    indicate duplicated detections. 0 when there are no ground truths.
    """
    if not 0.0 < score_threshold < 1.0 or not 0.0 < iou_threshold < 1.0:
        raise ValueError("duplicate_rate thresholds must lie in (0, 1)")
    if not gts:
        return 0.0
    confident = [p for p in preds if p.score > score_threshold]
    total = 0
    for g in gts:
        total += sum(1 for p in confident if iou(p.box, g.box) > iou_threshold)
    return total / len(gts)
