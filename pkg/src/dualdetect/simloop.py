"""Training orchestration: supervised burn-in, the EMA teacher-student
semi-supervised loop with pseudo-label flow, and the ablation sweeps.

Layout of one semi-supervised iteration (one labeled + one unlabeled scene):
teacher sees the weak view of the unlabeled scene and emits pseudo-labels
through the confidence filter; the student sees the strong view, with the
pseudo boxes mapped across augmentation frames; the student takes one SGD
step on supervised + omega * unsupervised gradients; the teacher follows by
EMA. Labeled scenes are consumed unaugmented by both trainers, which makes
a semi-supervised run with tau=1.0 or omega=0 reproduce the supervised
parameter trajectory bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .augment import map_boxes, strong_augment, weak_augment
from .data import Scene
from .detector import (
    FEATURE_DIM,
    DetectorParams,
    GridSpec,
    extract_features,
    init_params,
    map_params,
    param_gradients_from_features,
    params_to_json,
    predict_from_features,
    sgd_step,
    ema_update,
    zero_params,
)
from .geometry import GroundTruthBox, Prediction
from .losses import (
    LossConfig,
    focal_cls_loss,
    l1_reg_loss,
    loss_gradients,
)
from .matching import one_to_many_match, one_to_one_match
from .metrics import MetricsReport, map_coco
from .pseudo import FilterConfig, duplicate_rate, filter_pseudo_labels, nms


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


# Gradients are preconditioned Adam-style before each sgd_step: the focal
# force balance under per-scene updates is a relaxation oscillator (scores
# crash and recover in cycles) and plain steps never settle; the adaptive
# step damps the cycle. Deterministic, threaded state.
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

SCORE_PRIOR_BIAS = -0.14  # initial logit about -3.5: low foreground prior


@dataclass(frozen=True)
class _AdamState:
    m: DetectorParams
    v: DetectorParams
    t: int


def _fresh_adam() -> _AdamState:
    return _AdamState(m=zero_params(FEATURE_DIM), v=zero_params(FEATURE_DIM), t=0)


def _adam_precondition(state: _AdamState, grads: DetectorParams
                       ) -> Tuple[_AdamState, DetectorParams]:
    t = state.t + 1
    m = map_params(lambda mm, g: ADAM_BETA1 * mm + (1.0 - ADAM_BETA1) * g,
                   state.m, grads)
    v = map_params(lambda vv, g: ADAM_BETA2 * vv + (1.0 - ADAM_BETA2) * g * g,
                   state.v, grads)
    bias1 = 1.0 - ADAM_BETA1 ** t
    bias2 = 1.0 - ADAM_BETA2 ** t
    step = map_params(
        lambda mm, vv: (mm / bias1) / (np.sqrt(vv / bias2) + ADAM_EPS), m, v
    )
    return _AdamState(m=m, v=v, t=t), step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    burn_in_epochs: int = 10
    lr: float = 0.01
    ema_momentum: float = 0.999
    tau: float = 0.7
    omega: float = 0.5
    replication: int = 6
    o2o_grid: Tuple[int, int] = (6, 5)
    o2m_grid: Tuple[int, int] = (20, 20)
    o2o_anchor: float = 0.19
    o2m_anchor: float = 0.19
    seed: int = 0
    stages: int = 1
    o2o_branch_weight: float = 1.0
    o2m_blend: float = 1.0
    o2m_schedule_fraction: float = 0.7
    alpha1: float = 2.0
    alpha2: float = 5.0
    focal_gamma: float = 2.0
    # 0.5 rather than the textbook 0.25: with per-prediction mean
    # normalization the 1:3 positive weighting caps matched-cell confidence
    # below the 0.7 pseudo-label threshold, and no label ever flows
    focal_alpha: float = 0.5
    dup_score_threshold: float = 0.5
    dup_iou_threshold: float = 0.5
    nms_iou_threshold: float = 0.5
    # pseudo-label sets are incomplete (only confident objects survive the
    # filter), so the unmatched focal term on unlabeled scenes is damped to
    # keep it from erasing detections of unlabeled objects
    unsup_negative_weight: float = 0.1
    # the returned model averages the last epochs' parameters (Polyak);
    # per-scene focal updates oscillate and a single final snapshot is a
    # lottery draw from that cycle. 0 disables averaging.
    tail_average_epochs: int = 50

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.burn_in_epochs <= self.epochs:
            raise ValueError("burn-in must fit inside the epoch budget")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError("EMA momentum must lie in [0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.omega < 0 or self.o2m_blend < 0 or self.o2o_branch_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.replication < 1:
            raise ValueError("replication must be >= 1")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if not 0.0 <= self.o2m_schedule_fraction <= 1.0:
            raise ValueError("schedule fraction must lie in [0, 1]")
        if self.o2o_grid[0] < 1 or self.o2o_grid[1] < 1:
            raise ValueError("the one-to-one grid cannot be empty")
        if self.tail_average_epochs < 0:
            raise ValueError("tail averaging window cannot be negative")

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha1=self.alpha1, alpha2=self.alpha2, omega=self.omega,
            focal_gamma=self.focal_gamma, focal_alpha=self.focal_alpha,
        )

    def o2o_gridspec(self) -> GridSpec:
        return GridSpec(cols=self.o2o_grid[0], rows=self.o2o_grid[1],
                        anchor_w=self.o2o_anchor, anchor_h=self.o2o_anchor)

    def o2m_gridspec(self) -> Optional[GridSpec]:
        if self.o2m_grid[0] < 1 or self.o2m_grid[1] < 1:
            return None
        return GridSpec(cols=self.o2m_grid[0], rows=self.o2m_grid[1],
                        anchor_w=self.o2m_anchor, anchor_h=self.o2m_anchor)

    def as_dict(self) -> Dict:
        out = asdict(self)
        out["o2o_grid"] = list(self.o2o_grid)
        out["o2m_grid"] = list(self.o2m_grid)
        return out


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    sup_loss: float
    unsup_loss: float
    pseudo_count: int
    kept_ratio: float
    eval_map: Optional[float]
    duplicate_rate: Optional[float]
    param_digest: str


@dataclass(frozen=True)
class TrainHistory:
    config: Dict
    records: Tuple[EpochRecord, ...]


class _FeatureCache:
    """Features keyed by (scene id, grid, view tag); augmented views other
    than the pure flip are never cached."""

    def __init__(self) -> None:
        self._store: Dict = {}

    def get(self, scene: Scene, grid: GridSpec, tag: str = "clean") -> np.ndarray:
        key = (scene.id, grid.cols, grid.rows, grid.anchor_w, grid.anchor_h, tag)
        feats = self._store.get(key)
        if feats is None:
            feats = extract_features(scene.raster, grid)
            self._store[key] = feats
        return feats


def _param_digest(params: DetectorParams) -> str:
    return hashlib.md5(params_to_json(params).encode("ascii")).hexdigest()


def _branch_gradients(
    params: DetectorParams,
    feats: np.ndarray,
    grid: GridSpec,
    head: str,
    targets: Sequence[GroundTruthBox],
    cfg: TrainConfig,
    replication: Optional[int],
    unmatched_weight: float = 1.0,
) -> Tuple[DetectorParams, float]:
    """One matching branch over cfg.stages identical prediction stages."""
    loss_cfg = cfg.loss_config()
    weights = loss_cfg.match_weights()
    preds = predict_from_features(params, feats, grid, head)
    total_grads: Optional[DetectorParams] = None
    total_loss = 0.0
    for _ in range(cfg.stages):
        if replication is None:
            assignment = one_to_one_match(preds, targets, weights)
        else:
            assignment = one_to_many_match(preds, targets, replication, weights)
        cls = focal_cls_loss(preds, assignment, loss_cfg, unmatched_weight)
        box = l1_reg_loss(preds, targets, assignment)
        per_pred = loss_gradients(preds, targets, assignment, loss_cfg, unmatched_weight)
        grads = param_gradients_from_features(feats, grid, head, per_pred, params)
        total_grads = grads if total_grads is None else map_params(
            lambda a, b: a + b, total_grads, grads
        )
        total_loss += loss_cfg.alpha1 * cls + loss_cfg.alpha2 * box
    assert total_grads is not None
    return total_grads, total_loss


def _scale_params(grads: DetectorParams, weight: float) -> DetectorParams:
    if weight == 1.0:
        return grads
    return map_params(lambda g: g * weight, grads)


def _dual_grads(
    params: DetectorParams,
    feats_o2o: Optional[np.ndarray],
    feats_o2m: Optional[np.ndarray],
    targets: Sequence[GroundTruthBox],
    cfg: TrainConfig,
    o2m_weight: float,
    unmatched_weight: float = 1.0,
    o2o_weight: Optional[float] = None,
) -> Tuple[DetectorParams, float]:
    """Weighted sum of the two branch gradients for one scene."""
    if o2o_weight is None:
        o2o_weight = cfg.o2o_branch_weight
    grads: Optional[DetectorParams] = None
    loss = 0.0
    if o2o_weight > 0.0 and feats_o2o is not None:
        g, l = _branch_gradients(params, feats_o2o, cfg.o2o_gridspec(), "o2o",
                                 targets, cfg, None, unmatched_weight)
        grads = _scale_params(g, o2o_weight)
        loss = o2o_weight * l
    o2m_grid = cfg.o2m_gridspec()
    if o2m_weight > 0.0 and o2m_grid is not None and feats_o2m is not None:
        g, l = _branch_gradients(params, feats_o2m, o2m_grid, "o2m",
                                 targets, cfg, cfg.replication, unmatched_weight)
        g = _scale_params(g, o2m_weight)
        grads = g if grads is None else map_params(lambda a, b: a + b, grads, g)
        loss += o2m_weight * l
    if grads is None:
        grads = zero_params(FEATURE_DIM)
    return grads, loss


def _supervised_pass(
    params: DetectorParams,
    labeled: Sequence[Scene],
    cfg: TrainConfig,
    cache: _FeatureCache,
    opt: _AdamState,
) -> Tuple[DetectorParams, _AdamState, float]:
    """One epoch over the labeled scenes; returns updated params, optimizer
    state, and the mean per-scene loss (measured before each step)."""
    o2o_grid = cfg.o2o_gridspec()
    o2m_grid = cfg.o2m_gridspec()
    want_o2m = o2m_grid is not None and cfg.o2m_blend > 0.0
    losses: List[float] = []
    for scene in labeled:
        if not scene.gt_boxes:
            continue
        feats_o2o = cache.get(scene, o2o_grid) if cfg.o2o_branch_weight > 0 else None
        feats_o2m = cache.get(scene, o2m_grid) if want_o2m else None
        grads, loss = _dual_grads(params, feats_o2o, feats_o2m, scene.gt_boxes,
                                  cfg, cfg.o2m_blend)
        if not math.isfinite(loss):
            raise DivergenceError(f"supervised loss became {loss} on {scene.id}")
        opt, step = _adam_precondition(opt, grads)
        params = sgd_step(params, step, cfg.lr)
        losses.append(loss)
    return params, opt, (sum(losses) / len(losses) if losses else 0.0)


def _init_student(cfg: TrainConfig) -> DetectorParams:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    return init_params(rng, score_prior=SCORE_PRIOR_BIAS)


class _TailAverager:
    """Running mean of end-of-epoch parameters over the final window."""

    def __init__(self, cfg: TrainConfig) -> None:
        self._start = max(0, cfg.epochs - cfg.tail_average_epochs)
        self._enabled = cfg.tail_average_epochs > 0
        self._sum: Optional[DetectorParams] = None
        self._count = 0

    def update(self, epoch: int, params: DetectorParams) -> None:
        if not self._enabled or epoch < self._start:
            return
        self._sum = params if self._sum is None else map_params(
            lambda a, b: a + b, self._sum, params
        )
        self._count += 1

    def result(self, fallback: DetectorParams) -> DetectorParams:
        if self._sum is None:
            return fallback
        n = self._count
        return map_params(lambda a: a / n, self._sum)


def evaluate_detector(
    params: DetectorParams,
    scenes: Sequence[Scene],
    cfg: TrainConfig,
    cache: Optional[_FeatureCache] = None,
) -> Tuple[MetricsReport, float]:
    """Inference-path metrics plus the pre-suppression duplicate rate.

    Inference uses the one-to-one head with no suppression; when that
    branch is disabled (one-to-many-only ablation) it falls back to the
    one-to-many head followed by NMS.
    """
    cache = cache or _FeatureCache()
    use_o2o = cfg.o2o_branch_weight > 0.0
    grid = cfg.o2o_gridspec() if use_o2o else cfg.o2m_gridspec()
    if grid is None:
        raise ValueError("no inference head available for this configuration")
    head = "o2o" if use_o2o else "o2m"

    preds_by_image: Dict[str, List[Prediction]] = {}
    gts_by_image: Dict[str, Sequence[GroundTruthBox]] = {}
    dup_weighted = 0.0
    n_gts = 0
    for scene in scenes:
        feats = cache.get(scene, grid)
        preds = predict_from_features(params, feats, grid, head)
        if scene.gt_boxes:
            dup_weighted += duplicate_rate(
                preds, scene.gt_boxes, cfg.dup_score_threshold, cfg.dup_iou_threshold
            ) * len(scene.gt_boxes)
            n_gts += len(scene.gt_boxes)
        if not use_o2o:
            preds = nms(preds, cfg.nms_iou_threshold)
        preds_by_image[scene.id] = preds
        gts_by_image[scene.id] = scene.gt_boxes
    report = map_coco(preds_by_image, gts_by_image)
    dup = dup_weighted / n_gts if n_gts else 0.0
    return report, dup


def _epoch_eval(
    params: DetectorParams,
    eval_scenes: Optional[Sequence[Scene]],
    cfg: TrainConfig,
    cache: _FeatureCache,
) -> Tuple[Optional[float], Optional[float]]:
    if not eval_scenes:
        return None, None
    report, dup = evaluate_detector(params, eval_scenes, cfg, cache)
    return report.map, dup


def train_supervised(
    labeled: Sequence[Scene],
    cfg: TrainConfig,
    eval_scenes: Optional[Sequence[Scene]] = None,
) -> Tuple[DetectorParams, TrainHistory]:
    """Labeled-only baseline: both branches against true boxes, SGD steps
    per scene, deterministic for a given seed."""
    if not labeled:
        raise ValueError("supervised training needs at least one labeled scene")
    params = _init_student(cfg)
    cache = _FeatureCache()
    opt = _fresh_adam()
    averager = _TailAverager(cfg)
    records: List[EpochRecord] = []
    for epoch in range(cfg.epochs):
        params, opt, mean_loss = _supervised_pass(params, labeled, cfg, cache, opt)
        averager.update(epoch, params)
        eval_map, dup = _epoch_eval(params, eval_scenes, cfg, cache)
        records.append(EpochRecord(
            epoch=epoch, sup_loss=mean_loss, unsup_loss=0.0, pseudo_count=0,
            kept_ratio=0.0, eval_map=eval_map, duplicate_rate=dup,
            param_digest=_param_digest(params),
        ))
    return averager.result(params), TrainHistory(config=cfg.as_dict(),
                                                 records=tuple(records))


def train_semisupervised(
    labeled: Sequence[Scene],
    unlabeled: Sequence[Scene],
    cfg: TrainConfig,
    eval_scenes: Optional[Sequence[Scene]] = None,
    on_iteration: Optional[Callable] = None,
) -> Tuple[DetectorParams, DetectorParams, TrainHistory]:
    """Burn-in on labels, then the teacher-student loop.

    Per iteration: weak view -> teacher -> confidence filter -> map pseudo
    boxes into the student's strong view -> combined step -> EMA. With no
    pseudo-labels surviving an iteration (or omega 0) the unsupervised term
    is skipped outright, leaving the supervised arithmetic untouched.
    """
    if not labeled or not unlabeled:
        raise ValueError("semi-supervised training needs labeled and unlabeled scenes")
    student = _init_student(cfg)
    cache = _FeatureCache()
    opt = _fresh_adam()
    averager = _TailAverager(cfg)
    records: List[EpochRecord] = []

    for epoch in range(cfg.burn_in_epochs):
        student, opt, mean_loss = _supervised_pass(student, labeled, cfg, cache, opt)
        averager.update(epoch, student)
        eval_map, dup = _epoch_eval(student, eval_scenes, cfg, cache)
        records.append(EpochRecord(
            epoch=epoch, sup_loss=mean_loss, unsup_loss=0.0, pseudo_count=0,
            kept_ratio=0.0, eval_map=eval_map, duplicate_rate=dup,
            param_digest=_param_digest(student),
        ))

    teacher = student
    o2o_grid = cfg.o2o_gridspec()
    o2m_grid = cfg.o2m_gridspec()
    # pseudo-labels come from the one-to-many head: its densely supervised
    # query set is the one that reaches confident scores; the one-to-one
    # head only serves inference
    teacher_uses_o2m = o2m_grid is not None and cfg.o2m_blend > 0.0
    teacher_grid = o2m_grid if teacher_uses_o2m else o2o_grid
    teacher_head = "o2m" if teacher_uses_o2m else "o2o"

    post_epochs = cfg.epochs - cfg.burn_in_epochs
    unlabeled_cursor = 0
    for epoch in range(cfg.burn_in_epochs, cfg.epochs):
        # two-stage pseudo-label assignment: the one-to-many branch carries
        # the unsupervised loss first, then training switches over to the
        # one-to-one branch for the remainder
        phase_idx = epoch - cfg.burn_in_epochs
        o2m_schedule = 1.0 if phase_idx < cfg.o2m_schedule_fraction * post_epochs else 0.0
        pseudo_o2m_weight = cfg.o2m_blend * o2m_schedule
        pseudo_o2o_weight = cfg.o2o_branch_weight * (1.0 - o2m_schedule)

        sup_losses: List[float] = []
        unsup_losses: List[float] = []
        kept_total = 0
        generated_total = 0
        for it, scene_l in enumerate(labeled):
            scene_u = unlabeled[unlabeled_cursor % len(unlabeled)]
            unlabeled_cursor += 1

            # supervised component: identical arithmetic to the baseline
            feats_o2o = cache.get(scene_l, o2o_grid) if cfg.o2o_branch_weight > 0 else None
            want_o2m = o2m_grid is not None and cfg.o2m_blend > 0.0
            feats_o2m = cache.get(scene_l, o2m_grid) if want_o2m else None
            sup_grads, sup_loss = _dual_grads(
                student, feats_o2o, feats_o2m, scene_l.gt_boxes, cfg, cfg.o2m_blend
            )

            # teacher pseudo-labels from the weak view
            rng = np.random.default_rng(
                np.random.SeedSequence(cfg.seed, spawn_key=(2, epoch, it))
            )
            weak_scene, weak_rec = weak_augment(scene_u, rng)
            teacher_feats = cache.get(
                weak_scene, teacher_grid, tag="flip" if weak_rec.flip else "clean"
            )
            teacher_preds = predict_from_features(
                teacher, teacher_feats, teacher_grid, teacher_head
            )
            # consolidate the teacher's overlapping proposals into one box
            # per object before filtering; the NMS-free contract concerns
            # the inference path, not pseudo-label generation. Candidates at
            # or below tau can never survive the filter nor suppress a
            # higher-scored box, so they are dropped first.
            candidates = [p for p in teacher_preds if p.score > cfg.tau]
            teacher_consolidated = nms(candidates, cfg.nms_iou_threshold) if candidates else []
            pseudo = filter_pseudo_labels(teacher_consolidated, FilterConfig(tau=cfg.tau))
            kept_total += len(pseudo)
            generated_total += len(teacher_preds)

            strong_scene, strong_rec = strong_augment(scene_u, rng)
            mapped = map_boxes(pseudo.boxes, weak_rec, strong_rec)

            unsup_loss = 0.0
            total_grads = sup_grads
            if cfg.omega > 0.0 and mapped and (pseudo_o2o_weight > 0 or pseudo_o2m_weight > 0):
                s_feats_o2o = (
                    extract_features(strong_scene.raster, o2o_grid)
                    if pseudo_o2o_weight > 0 else None
                )
                s_feats_o2m = (
                    extract_features(strong_scene.raster, o2m_grid)
                    if o2m_grid is not None and pseudo_o2m_weight > 0 else None
                )
                unsup_grads, unsup_loss = _dual_grads(
                    student, s_feats_o2o, s_feats_o2m, mapped, cfg,
                    pseudo_o2m_weight, cfg.unsup_negative_weight,
                    o2o_weight=pseudo_o2o_weight,
                )
                total_grads = map_params(
                    lambda a, b: a + b, sup_grads, _scale_params(unsup_grads, cfg.omega)
                )

            if not math.isfinite(sup_loss) or not math.isfinite(unsup_loss):
                raise DivergenceError(
                    f"loss became non-finite at epoch {epoch} iteration {it}"
                )
            opt, step = _adam_precondition(opt, total_grads)
            student = sgd_step(student, step, cfg.lr)
            teacher = ema_update(teacher, student, cfg.ema_momentum)
            sup_losses.append(sup_loss)
            unsup_losses.append(unsup_loss)
            if on_iteration is not None:
                on_iteration(epoch, it, student, teacher, len(pseudo))

        averager.update(epoch, student)
        eval_map, dup = _epoch_eval(student, eval_scenes, cfg, cache)
        records.append(EpochRecord(
            epoch=epoch,
            sup_loss=sum(sup_losses) / len(sup_losses) if sup_losses else 0.0,
            unsup_loss=sum(unsup_losses) / len(unsup_losses) if unsup_losses else 0.0,
            pseudo_count=kept_total,
            kept_ratio=kept_total / generated_total if generated_total else 0.0,
            eval_map=eval_map,
            duplicate_rate=dup,
            param_digest=_param_digest(student),
        ))

    return (averager.result(student), teacher,
            TrainHistory(config=cfg.as_dict(), records=tuple(records)))


# --- sweeps -------------------------------------------------------------------

def sweep_threshold(
    labeled: Sequence[Scene],
    unlabeled: Sequence[Scene],
    cfg: TrainConfig,
    taus: Sequence[float],
    eval_scenes: Sequence[Scene],
) -> List[Dict]:
    """One semi-supervised run per confidence threshold, shared seed."""
    if not taus:
        raise ValueError("threshold sweep needs at least one tau")
    rows: List[Dict] = []
    for tau in taus:
        run_cfg = replace(cfg, tau=float(tau))
        student, _, history = train_semisupervised(labeled, unlabeled, run_cfg)
        n_iters = (run_cfg.epochs - run_cfg.burn_in_epochs) * len(labeled)
        total_pseudo = sum(r.pseudo_count for r in history.records)
        report, _ = evaluate_detector(student, eval_scenes, run_cfg)
        rows.append({
            "tau": float(tau),
            "final_map": report.map,
            "mean_pseudo_per_iter": total_pseudo / n_iters if n_iters else 0.0,
        })
    return rows


def sweep_queries(
    labeled: Sequence[Scene],
    unlabeled: Sequence[Scene],
    cfg: TrainConfig,
    grids: Sequence[Tuple[Tuple[int, int], Tuple[int, int]]],
    eval_scenes: Sequence[Scene],
) -> List[Dict]:
    """One run per (one-to-one grid, one-to-many grid) pair, shared seed.

    A (0, 0) one-to-many grid disables that branch entirely.
    """
    if not grids:
        raise ValueError("query sweep needs at least one grid pair")
    rows: List[Dict] = []
    for o2o_grid, o2m_grid in grids:
        run_cfg = replace(cfg, o2o_grid=tuple(o2o_grid), o2m_grid=tuple(o2m_grid))
        student, _, _ = train_semisupervised(labeled, unlabeled, run_cfg)
        report, _ = evaluate_detector(student, eval_scenes, run_cfg)
        rows.append({
            "o2o_queries": o2o_grid[0] * o2o_grid[1],
            "o2m_queries": o2m_grid[0] * o2m_grid[1],
            "final_map": report.map,
        })
    return rows


STRATEGIES = ("o2o-only", "o2m-only+nms", "dual")


def _strategy_config(cfg: TrainConfig, strategy: str) -> TrainConfig:
    if strategy == "o2o-only":
        return replace(cfg, o2m_blend=0.0)
    if strategy == "o2m-only+nms":
        # schedule pinned open so the only training branch never switches off
        return replace(cfg, o2o_branch_weight=0.0, o2m_schedule_fraction=1.0)
    if strategy == "dual":
        return cfg
    raise ValueError(f"unknown strategy {strategy!r}")


def ablate_strategies(
    labeled: Sequence[Scene],
    unlabeled: Sequence[Scene],
    cfg: TrainConfig,
    eval_scenes: Sequence[Scene],
) -> List[Dict]:
    """o2o-only vs o2m-only (NMS at inference) vs dual, one shared seed.

    Reports the pre-suppression duplicate rate and the number of NMS calls
    each run made (training plus evaluation); the dual path must show zero.
    """
    from .pseudo import nms_call_count, reset_nms_call_count

    rows: List[Dict] = []
    for strategy in STRATEGIES:
        run_cfg = _strategy_config(cfg, strategy)
        t0 = time.perf_counter()
        student, _, _ = train_semisupervised(labeled, unlabeled, run_cfg)
        # the suppression-free contract concerns inference: count NMS calls
        # made while producing the evaluated detections
        reset_nms_call_count()
        report, dup = evaluate_detector(student, eval_scenes, run_cfg)
        inference_nms_calls = nms_call_count()
        wall = time.perf_counter() - t0
        rows.append({
            "strategy": strategy,
            "map": report.map,
            "duplicate_rate": dup,
            "nms_calls": inference_nms_calls,
            "wall_time_s": wall,
        })
    return rows


# --- persistence ----------------------------------------------------------------

HISTORY_COLUMNS = (
    "epoch", "sup_loss", "unsup_loss", "pseudo_count", "kept_ratio",
    "eval_map", "duplicate_rate", "param_digest",
)


def _fmt_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _config_line(config: Dict) -> str:
    return "# config: " + json.dumps(config, sort_keys=True, separators=(",", ":"))


def history_to_csv(history: TrainHistory) -> str:
    lines = [_config_line(history.config), ",".join(HISTORY_COLUMNS)]
    for r in history.records:
        lines.append(",".join(_fmt_cell(getattr(r, col)) for col in HISTORY_COLUMNS))
    return "\n".join(lines) + "\n"


def history_to_json(history: TrainHistory) -> str:
    payload = {
        "config": history.config,
        "records": [
            {col: getattr(r, col) for col in HISTORY_COLUMNS}
            for r in history.records
        ],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def sweep_rows_to_csv(rows: Sequence[Dict], columns: Sequence[str],
                      config: Dict) -> str:
    """Deterministic sweep table. Wall-clock columns are deliberately not
    serializable here: output files must be byte-stable across reruns."""
    assert "wall_time_s" not in columns
    lines = [_config_line(config), ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt_cell(row[col]) for col in columns))
    return "\n".join(lines) + "\n"
