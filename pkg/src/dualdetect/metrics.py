"""COCO-style and fixed-IoU detection metrics for the single table class.

map_coco ranks detections globally by score, matches greedily per image at
each IoU threshold in 0.50:0.05:0.95, and averages 101-point interpolated
AP over the thresholds. ar_large restricts recall to large ground truths
(area fraction above a configurable cutoff). prf_at_iou gives the fixed
threshold precision/recall/F1 protocol.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geometry import GroundTruthBox, Prediction

IOU_THRESHOLDS: Tuple[float, ...] = tuple(0.5 + 0.05 * k for k in range(10))

PredsByImage = Mapping[str, Sequence[Prediction]]
GtsByImage = Mapping[str, Sequence[GroundTruthBox]]


@dataclass(frozen=True)
class PRCurve:
    """(recall, precision) after each ranked detection."""

    recalls: Tuple[float, ...]
    precisions: Tuple[float, ...]
    tp: int
    fp: int
    n_gt: int


@dataclass(frozen=True)
class MetricsReport:
    map: float
    ap50: float
    ap75: float
    ar_large: Optional[float]
    per_threshold: Tuple[Tuple[float, float], ...]
    prf: Tuple[Tuple[float, float, float, float], ...]  # (iou, p, r, f1)


def _iou_matrix(preds: Sequence[Prediction], gts: Sequence[GroundTruthBox]) -> np.ndarray:
    """Pairwise IoU; expression mirrors geometry.iou exactly so scalar and
    vectorized routes agree bitwise."""
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    pb = np.array([[p.box.cx, p.box.cy, p.box.w, p.box.h] for p in preds])
    gb = np.array([[g.box.cx, g.box.cy, g.box.w, g.box.h] for g in gts])
    px1 = pb[:, 0] - pb[:, 2] / 2.0
    px2 = pb[:, 0] + pb[:, 2] / 2.0
    py1 = pb[:, 1] - pb[:, 3] / 2.0
    py2 = pb[:, 1] + pb[:, 3] / 2.0
    gx1 = gb[:, 0] - gb[:, 2] / 2.0
    gx2 = gb[:, 0] + gb[:, 2] / 2.0
    gy1 = gb[:, 1] - gb[:, 3] / 2.0
    gy2 = gb[:, 1] + gb[:, 3] / 2.0
    iw = np.minimum(px2[:, None], gx2[None, :]) - np.maximum(px1[:, None], gx1[None, :])
    ih = np.minimum(py2[:, None], gy2[None, :]) - np.maximum(py1[:, None], gy1[None, :])
    inter = np.where((iw > 0.0) & (ih > 0.0), iw * ih, 0.0)
    area_p = pb[:, 2] * pb[:, 3]
    area_g = gb[:, 2] * gb[:, 3]
    union = area_p[:, None] + area_g[None, :] - inter
    return inter / union


def greedy_match_for_eval(
    preds: Sequence[Prediction],
    gts: Sequence[GroundTruthBox],
    iou_t: float,
) -> List[bool]:
    """True/false positive flags, in the given prediction order.

    Predictions must already be sorted by descending score. Each one grabs
    the highest-IoU still-unmatched ground truth when that IoU reaches the
    threshold; every ground truth is matched at most once.
    """
    if not 0.0 < iou_t < 1.0:
        raise ValueError(f"iou threshold must lie in (0, 1), got {iou_t}")
    flags = [False] * len(preds)
    if not gts:
        return flags
    overlaps = _iou_matrix(preds, gts)
    taken = [False] * len(gts)
    for i in range(len(preds)):
        best_j = -1
        best = 0.0
        for j in range(len(gts)):
            if not taken[j] and overlaps[i, j] > best:
                best = overlaps[i, j]
                best_j = j
        if best_j >= 0 and best >= iou_t:
            taken[best_j] = True
            flags[i] = True
    return flags


def pr_curve(flags: Sequence[bool], n_gt: int) -> PRCurve:
    if n_gt <= 0:
        raise ValueError("PR curve undefined without ground truth")
    tp = 0
    recalls: List[float] = []
    precisions: List[float] = []
    for rank, flag in enumerate(flags, start=1):
        if flag:
            tp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / rank)
    return PRCurve(
        recalls=tuple(recalls),
        precisions=tuple(precisions),
        tp=tp,
        fp=len(flags) - tp,
        n_gt=n_gt,
    )


def _precision_envelope(curve: PRCurve) -> List[float]:
    """max precision at recall >= recall_k, per ranked point."""
    env: List[float] = [0.0] * len(curve.precisions)
    best = 0.0
    for k in range(len(curve.precisions) - 1, -1, -1):
        if curve.precisions[k] > best:
            best = curve.precisions[k]
        env[k] = best
    return env


def average_precision(curve: PRCurve, scheme: str = "101-point") -> float:
    """Area under the interpolated PR curve.

    "all-point": sum of recall increments times the interpolated precision.
    "101-point": mean interpolated precision over the recall grid
    {0.00, 0.01, ..., 1.00}.
    """
    env = _precision_envelope(curve)
    if scheme == "all-point":
        total = 0.0
        prev_recall = 0.0
        for k in range(len(curve.recalls)):
            if curve.recalls[k] > prev_recall:
                total += (curve.recalls[k] - prev_recall) * env[k]
                prev_recall = curve.recalls[k]
        return total
    if scheme == "101-point":
        total = 0.0
        for step in range(101):
            r = step / 100.0
            best = 0.0
            for k in range(len(curve.recalls)):
                if curve.recalls[k] >= r:
                    best = env[k]
                    break
            total += best
        return total / 101.0
    raise ValueError(f"unknown AP scheme {scheme!r}")


def _ranked_flags(
    preds_by_image: PredsByImage,
    gts_by_image: GtsByImage,
    iou_t: float,
) -> Tuple[List[bool], int]:
    """Per-image greedy flags merged into a single global score ranking.

    Ties in score keep insertion order (images in mapping order, then
    prediction order), which makes reruns and the reference evaluator agree
    exactly.
    """
    ranked: List[Tuple[float, bool]] = []
    for image_id, preds in preds_by_image.items():
        if image_id not in gts_by_image:
            raise ValueError(f"predictions reference unknown image {image_id!r}")
        order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
        local = [preds[i] for i in order]
        local_flags = greedy_match_for_eval(local, gts_by_image[image_id], iou_t)
        flags_by_input = [False] * len(preds)
        for pos, i in enumerate(order):
            flags_by_input[i] = local_flags[pos]
        for i, p in enumerate(preds):
            ranked.append((p.score, flags_by_input[i]))
    global_order = sorted(range(len(ranked)), key=lambda i: -ranked[i][0])
    n_gt = sum(len(g) for g in gts_by_image.values())
    return [ranked[i][1] for i in global_order], n_gt


def ap_at_iou(preds_by_image: PredsByImage, gts_by_image: GtsByImage,
              iou_t: float, scheme: str = "101-point") -> float:
    flags, n_gt = _ranked_flags(preds_by_image, gts_by_image, iou_t)
    return average_precision(pr_curve(flags, n_gt), scheme)


def ar_large(
    preds_by_image: PredsByImage,
    gts_by_image: GtsByImage,
    max_dets: int = 100,
    large_threshold: float = 0.04,
) -> Optional[float]:
    """Recall over large ground truths, averaged over the IoU ladder.

    Uses the top `max_dets` detections per image. Returns None (absent)
    when the dataset holds no large ground truth at all.
    """
    large = {
        image_id: [g for g in gts if g.box.w * g.box.h > large_threshold]
        for image_id, gts in gts_by_image.items()
    }
    n_large = sum(len(g) for g in large.values())
    if n_large == 0:
        return None
    total = 0.0
    for iou_t in IOU_THRESHOLDS:
        found = 0
        for image_id, gts in large.items():
            preds = sorted(
                preds_by_image.get(image_id, ()), key=lambda p: -p.score
            )[:max_dets]
            found += sum(greedy_match_for_eval(preds, gts, iou_t))
        total += found / n_large
    return total / len(IOU_THRESHOLDS)


def prf_at_iou(
    preds_by_image: PredsByImage,
    gts_by_image: GtsByImage,
    iou_t: float,
    score_t: float = 0.5,
) -> Tuple[float, float, float]:
    """Precision/recall/F1 with detections above a fixed score threshold."""
    tp = 0
    n_kept = 0
    n_gt = sum(len(g) for g in gts_by_image.values())
    for image_id, preds in preds_by_image.items():
        kept = sorted(
            (p for p in preds if p.score > score_t), key=lambda p: -p.score
        )
        n_kept += len(kept)
        tp += sum(greedy_match_for_eval(kept, gts_by_image.get(image_id, ()), iou_t))
    precision = tp / n_kept if n_kept else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def map_coco(
    preds_by_image: PredsByImage,
    gts_by_image: GtsByImage,
    prf_ious: Sequence[float] = (0.8, 0.9),
    prf_score_t: float = 0.5,
    max_dets: int = 100,
    large_threshold: float = 0.04,
) -> MetricsReport:
    """Full report: mAP over the IoU ladder, AP50/AP75, large-object recall,
    and P/R/F1 at the requested fixed thresholds."""
    n_gt = sum(len(g) for g in gts_by_image.values())
    if n_gt == 0:
        raise ValueError("metrics undefined: dataset has no ground-truth boxes")
    aps = [ap_at_iou(preds_by_image, gts_by_image, t) for t in IOU_THRESHOLDS]
    prf = tuple(
        (iou_t, *prf_at_iou(preds_by_image, gts_by_image, iou_t, prf_score_t))
        for iou_t in prf_ious
    )
    return MetricsReport(
        map=sum(aps) / len(aps),
        ap50=aps[0],
        ap75=aps[5],
        ar_large=ar_large(preds_by_image, gts_by_image, max_dets, large_threshold),
        per_threshold=tuple(zip(IOU_THRESHOLDS, aps)),
        prf=prf,
    )


# --- emission ----------------------------------------------------------------

CSV_HEADER = "map,ap50,ap75,ar_large,p_80,r_80,f1_80,p_90,r_90,f1_90"


def _flat_metrics(report: MetricsReport) -> Dict[str, Optional[float]]:
    flat: Dict[str, Optional[float]] = {
        "map": report.map,
        "ap50": report.ap50,
        "ap75": report.ap75,
        "ar_large": report.ar_large,
    }
    for iou_t, p, r, f1 in report.prf:
        key = f"{int(round(iou_t * 100))}"
        flat[f"p_{key}"] = p
        flat[f"r_{key}"] = r
        flat[f"f1_{key}"] = f1
    return flat


def metrics_to_json(report: MetricsReport, config: Optional[Dict] = None) -> str:
    payload: Dict = {"config": config or {}}
    payload.update(_flat_metrics(report))
    payload["per_threshold"] = {f"{t:.2f}": ap for t, ap in report.per_threshold}
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def metrics_to_csv(report: MetricsReport, config: Optional[Dict] = None) -> str:
    flat = _flat_metrics(report)
    cells = []
    for key in CSV_HEADER.split(","):
        v = flat.get(key)
        cells.append("" if v is None else repr(float(v)))
    lines = []
    if config is not None:
        lines.append("# config: " + json.dumps(config, sort_keys=True,
                                               separators=(",", ":")))
    lines.append(CSV_HEADER)
    lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
