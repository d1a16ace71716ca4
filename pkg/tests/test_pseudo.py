import numpy as np
import pytest

from dualdetect.geometry import BBox, GroundTruthBox, Prediction, iou
from dualdetect.pseudo import (
    FilterConfig,
    duplicate_rate,
    filter_pseudo_labels,
    nms,
    nms_call_count,
    reset_nms_call_count,
)


def pred(cx, cy, w, h, score):
    return Prediction(box=BBox(cx, cy, w, h), score=score)


def random_preds(rng, n):
    out = []
    for _ in range(n):
        w = rng.uniform(0.05, 0.4)
        h = rng.uniform(0.05, 0.4)
        out.append(
            pred(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2),
                 w, h, rng.uniform(0, 1))
        )
    return out


class TestFilter:
    def test_strict_threshold(self):
        preds = [
            pred(0.5, 0.5, 0.2, 0.2, 0.9),
            pred(0.4, 0.4, 0.2, 0.2, 0.7),
            pred(0.3, 0.3, 0.2, 0.2, 0.2),
        ]
        kept = filter_pseudo_labels(preds, FilterConfig(tau=0.7))
        assert len(kept) == 1
        assert kept.source_scores == (0.9,)
        assert kept.boxes[0].box == preds[0].box

    def test_zero_threshold_keeps_positive_scores(self):
        preds = [pred(0.5, 0.5, 0.2, 0.2, 0.01), pred(0.4, 0.4, 0.2, 0.2, 0.0)]
        kept = filter_pseudo_labels(preds, FilterConfig(tau=0.0))
        assert len(kept) == 1

    def test_default_matches_operating_point(self):
        assert FilterConfig().tau == 0.7

    def test_order_preserved(self):
        preds = [pred(0.1 * i + 0.2, 0.5, 0.1, 0.1, 0.8) for i in range(4)]
        kept = filter_pseudo_labels(preds, FilterConfig(tau=0.5))
        assert [b.box.cx for b in kept.boxes] == [p.box.cx for p in preds]

    def test_monotone_in_tau(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            preds = random_preds(rng, 10)
            t1, t2 = sorted(rng.uniform(0, 1, size=2))
            lo = filter_pseudo_labels(preds, FilterConfig(tau=float(t1)))
            hi = filter_pseudo_labels(preds, FilterConfig(tau=float(t2)))
            assert set(hi.source_scores) <= set(lo.source_scores)

    def test_scores_strictly_above_threshold(self):
        rng = np.random.default_rng(22)
        preds = random_preds(rng, 30)
        kept = filter_pseudo_labels(preds, FilterConfig(tau=0.5))
        assert all(s > 0.5 for s in kept.source_scores)


class TestNms:
    def test_single_prediction_unchanged(self):
        p = pred(0.5, 0.5, 0.2, 0.2, 0.8)
        assert nms([p], 0.5) == [p]

    def test_duplicate_suppressed(self):
        a = pred(0.5, 0.5, 0.2, 0.2, 0.9)
        b = pred(0.5, 0.5, 0.2, 0.2, 0.8)
        kept = nms([b, a], 0.5)
        assert kept == [a]

    def test_disjoint_boxes_survive(self):
        a = pred(0.2, 0.2, 0.1, 0.1, 0.9)
        b = pred(0.8, 0.8, 0.1, 0.1, 0.3)
        assert nms([a, b], 0.5) == [a, b]

    def test_survivors_pairwise_below_threshold(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            kept = nms(random_preds(rng, 12), 0.4)
            for i in range(len(kept)):
                for j in range(i + 1, len(kept)):
                    assert iou(kept[i].box, kept[j].box) <= 0.4

    def test_idempotent(self):
        rng = np.random.default_rng(24)
        for _ in range(50):
            once = nms(random_preds(rng, 12), 0.5)
            assert nms(once, 0.5) == once

    def test_output_sorted_by_score(self):
        rng = np.random.default_rng(25)
        kept = nms(random_preds(rng, 15), 0.5)
        scores = [p.score for p in kept]
        assert scores == sorted(scores, reverse=True)

    def test_bad_threshold_raises(self):
        with pytest.raises(ValueError):
            nms([], 0.0)
        with pytest.raises(ValueError):
            nms([], 1.0)

    def test_call_counter(self):
        reset_nms_call_count()
        assert nms_call_count() == 0
        nms([], 0.5)
        nms([], 0.5)
        assert nms_call_count() == 2
        reset_nms_call_count()
        assert nms_call_count() == 0


class TestDuplicateRate:
    def test_one_hit_per_gt(self):
        gts = [GroundTruthBox(box=BBox(0.3, 0.3, 0.2, 0.2)),
               GroundTruthBox(box=BBox(0.7, 0.7, 0.2, 0.2))]
        preds = [Prediction(box=g.box, score=0.9) for g in gts]
        assert duplicate_rate(preds, gts, 0.5, 0.5) == 1.0

    def test_two_overlapping_preds(self):
        g = GroundTruthBox(box=BBox(0.5, 0.5, 0.3, 0.3))
        preds = [Prediction(box=g.box, score=0.9),
                 Prediction(box=BBox(0.51, 0.5, 0.3, 0.3), score=0.8)]
        assert duplicate_rate(preds, [g], 0.5, 0.5) == 2.0

    def test_no_gts_returns_zero(self):
        assert duplicate_rate([pred(0.5, 0.5, 0.2, 0.2, 0.9)], [], 0.5, 0.5) == 0.0

    def test_nms_never_increases_rate(self):
        rng = np.random.default_rng(26)
        for _ in range(40):
            gts = [GroundTruthBox(box=BBox(0.3, 0.3, 0.25, 0.25)),
                   GroundTruthBox(box=BBox(0.75, 0.75, 0.25, 0.25))]
            preds = random_preds(rng, 12)
            before = duplicate_rate(preds, gts, 0.3, 0.5)
            after = duplicate_rate(nms(preds, 0.5), gts, 0.3, 0.5)
            assert after <= before

    def test_nms_bounds_rate_on_separated_clusters(self):
        # two well-separated ground truths, each with its own pile of
        # near-identical detections: suppression leaves at most one per pile
        rng = np.random.default_rng(27)
        gts = [GroundTruthBox(box=BBox(0.25, 0.25, 0.2, 0.2)),
               GroundTruthBox(box=BBox(0.75, 0.75, 0.2, 0.2))]
        preds = []
        for g in gts:
            for _ in range(5):
                preds.append(Prediction(
                    box=BBox(g.box.cx + rng.uniform(-0.01, 0.01),
                             g.box.cy + rng.uniform(-0.01, 0.01),
                             g.box.w, g.box.h),
                    score=float(rng.uniform(0.6, 1.0)),
                ))
        assert duplicate_rate(preds, gts, 0.5, 0.5) > 1.0
        assert duplicate_rate(nms(preds, 0.5), gts, 0.5, 0.5) <= 1.0
