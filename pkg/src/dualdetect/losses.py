"""Classification and box-regression losses for the two matching branches,
their per-stage aggregation, and analytic per-prediction gradients.

The classification loss is a sigmoid focal loss (gamma=2, alpha=0.25); the
regression loss is the mean L1 box distance over matched pairs. Both are
normalized per prediction / per pair so their magnitude does not drift when
the query count changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .geometry import GroundTruthBox, Prediction, l1_box_distance
from .matching import Assignment, MatchWeights, one_to_many_match, one_to_one_match

SCORE_EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 2.0          # classification weight
    alpha2: float = 5.0          # box-regression weight
    omega: float = 1.0           # unsupervised-term weight
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self) -> None:
        if self.alpha1 < 0 or self.alpha2 < 0 or self.omega < 0:
            raise ValueError("loss weights must be non-negative")
        if self.focal_gamma < 0:
            raise ValueError("focal gamma must be non-negative")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError("focal alpha must lie strictly inside (0, 1)")

    def match_weights(self) -> MatchWeights:
        return MatchWeights(alpha1=self.alpha1, alpha2=self.alpha2)


@dataclass(frozen=True)
class LossReport:
    """cls/box are summed over stages; total = alpha1*cls + alpha2*box."""

    cls: float
    box: float
    total: float
    per_layer: Tuple[Tuple[float, float], ...]


@dataclass(frozen=True)
class PredGradient:
    d_score: float
    d_box: np.ndarray  # (4,): d/d cx, cy, w, h


def clamp_score(score: float) -> float:
    if score < 0.0 or score > 1.0:
        raise ValueError(f"score {score} outside [0, 1]")
    return min(max(score, SCORE_EPS), 1.0 - SCORE_EPS)


def focal_cls_loss(
    preds: Sequence[Prediction],
    assignment: Assignment,
    cfg: LossConfig = LossConfig(),
    unmatched_weight: float = 1.0,
) -> float:
    """Mean focal term over all predictions.

    Matched predictions contribute -alpha*(1-p)^gamma*ln(p), unmatched
    -(1-alpha)*p^gamma*ln(1-p). `unmatched_weight` scales the unmatched
    term; training paths whose targets may be incomplete (pseudo-labels)
    use it to avoid punishing detections of unlabeled objects.
    """
    if not preds:
        return 0.0
    matched = {i for i, _ in assignment.pairs}
    a = cfg.focal_alpha
    g = cfg.focal_gamma
    total = 0.0
    for i, p in enumerate(preds):
        s = clamp_score(p.score)
        if i in matched:
            total += -a * (1.0 - s) ** g * math.log(s)
        else:
            total += -unmatched_weight * (1.0 - a) * s ** g * math.log(1.0 - s)
    return total / len(preds)


def l1_reg_loss(
    preds: Sequence[Prediction],
    targets: Sequence[GroundTruthBox],
    assignment: Assignment,
) -> float:
    """Mean L1 box distance over matched pairs; 0 with no pairs."""
    if not assignment.pairs:
        return 0.0
    total = 0.0
    for pred_idx, target_idx in assignment.pairs:
        if not (0 <= pred_idx < len(preds)) or not (0 <= target_idx < len(targets)):
            raise ValueError(
                f"assignment pair ({pred_idx}, {target_idx}) does not fit "
                f"{len(preds)} predictions / {len(targets)} targets"
            )
        total += l1_box_distance(preds[pred_idx].box, targets[target_idx].box)
    return total / len(assignment.pairs)


def _stage_losses(
    stage_preds: Sequence[Sequence[Prediction]],
    targets: Sequence[GroundTruthBox],
    cfg: LossConfig,
    match_fn,
    unmatched_weight: float = 1.0,
) -> LossReport:
    if not stage_preds:
        raise ValueError("at least one prediction stage is required")
    per_layer: List[Tuple[float, float]] = []
    for preds in stage_preds:
        assignment = match_fn(preds)
        cls = focal_cls_loss(preds, assignment, cfg, unmatched_weight)
        box = l1_reg_loss(preds, targets, assignment)
        per_layer.append((cls, box))
    cls_sum = sum(c for c, _ in per_layer)
    box_sum = sum(b for _, b in per_layer)
    return LossReport(
        cls=cls_sum,
        box=box_sum,
        total=cfg.alpha1 * cls_sum + cfg.alpha2 * box_sum,
        per_layer=tuple(per_layer),
    )


def loss_o2o(
    stage_preds: Sequence[Sequence[Prediction]],
    targets: Sequence[GroundTruthBox],
    cfg: LossConfig = LossConfig(),
    unmatched_weight: float = 1.0,
) -> LossReport:
    """One-to-one branch loss summed over prediction stages."""
    weights = cfg.match_weights()
    return _stage_losses(
        stage_preds, targets, cfg,
        lambda preds: one_to_one_match(preds, targets, weights),
        unmatched_weight,
    )


def loss_o2m(
    stage_preds: Sequence[Sequence[Prediction]],
    targets: Sequence[GroundTruthBox],
    replication: int,
    cfg: LossConfig = LossConfig(),
    unmatched_weight: float = 1.0,
) -> LossReport:
    """One-to-many branch loss: targets replicated before matching."""
    weights = cfg.match_weights()
    return _stage_losses(
        stage_preds,
        targets,
        cfg,
        lambda preds: one_to_many_match(preds, targets, replication, weights),
        unmatched_weight,
    )


def combined_loss(supervised: float, unsupervised: float, omega: float) -> float:
    if supervised < 0.0 or unsupervised < 0.0:
        raise ValueError("loss terms must be non-negative")
    return supervised + omega * unsupervised


def _focal_matched_derivative(s: float, a: float, g: float) -> float:
    # d/ds of -a*(1-s)^g*ln(s)
    return a * g * (1.0 - s) ** (g - 1.0) * math.log(s) - a * (1.0 - s) ** g / s


def _focal_unmatched_derivative(s: float, a: float, g: float) -> float:
    # d/ds of -(1-a)*s^g*ln(1-s)
    return -(1.0 - a) * (g * s ** (g - 1.0) * math.log(1.0 - s) - s ** g / (1.0 - s))


def loss_gradients(
    preds: Sequence[Prediction],
    targets: Sequence[GroundTruthBox],
    assignment: Assignment,
    cfg: LossConfig = LossConfig(),
    unmatched_weight: float = 1.0,
) -> List[PredGradient]:
    """d(alpha1*cls + alpha2*box)/d(prediction) under a fixed assignment.

    The L1 subgradient at zero residual is taken as 0; box gradients of
    unmatched predictions are 0. `unmatched_weight` must match the value
    used in focal_cls_loss.
    """
    n = len(preds)
    matched_target = dict(assignment.pairs)
    n_pairs = len(assignment.pairs)
    out: List[PredGradient] = []
    for i, p in enumerate(preds):
        s = clamp_score(p.score)
        if i in matched_target:
            d_cls = _focal_matched_derivative(s, cfg.focal_alpha, cfg.focal_gamma)
            t = targets[matched_target[i]]
            residual = np.array(
                [
                    p.box.cx - t.box.cx,
                    p.box.cy - t.box.cy,
                    p.box.w - t.box.w,
                    p.box.h - t.box.h,
                ]
            )
            d_box = np.sign(residual) * (cfg.alpha2 / n_pairs)
        else:
            d_cls = unmatched_weight * _focal_unmatched_derivative(
                s, cfg.focal_alpha, cfg.focal_gamma
            )
            d_box = np.zeros(4)
        out.append(PredGradient(d_score=cfg.alpha1 * d_cls / n, d_box=d_box))
    return out
