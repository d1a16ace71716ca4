import hashlib
import json

import numpy as np
import pytest

from dualdetect.detector import (
    DEFAULT_O2M_GRID,
    DEFAULT_O2O_GRID,
    DetectorParams,
    GridSpec,
    Raster,
    ema_update,
    extract_features,
    init_params,
    load_checkpoint,
    map_params,
    param_gradients,
    params_from_json,
    params_max_abs_diff,
    params_to_json,
    predict,
    sgd_step,
    write_checkpoint,
    zero_params,
)
from dualdetect.geometry import GroundTruthBox, BBox
from dualdetect.losses import LossConfig, focal_cls_loss, l1_reg_loss, loss_gradients
from dualdetect.matching import one_to_one_match


def random_raster(rng, w=32, h=32) -> Raster:
    return Raster(width=w, height=h, values=rng.uniform(0.0, 1.0, size=(h, w)))


class TestExtractFeatures:
    def test_constant_raster(self):
        r = Raster(width=16, height=16, values=np.full((16, 16), 0.37))
        feats = extract_features(r, GridSpec(4, 4))
        assert np.all(np.abs(feats[:, 1]) < 1e-12)  # variance
        assert np.all(feats[:, 2] == 0.0)           # horizontal gradients
        assert np.all(feats[:, 3] == 0.0)           # vertical gradients
        assert np.allclose(feats[:, 0], 0.37, atol=1e-12)

    def test_all_zero_raster(self):
        r = Raster(width=8, height=8, values=np.zeros((8, 8)))
        feats = extract_features(r, GridSpec(2, 2))
        assert np.all(feats[:, 0] == 0.0)
        assert np.all(feats[:, 4] == 1.0)

    def test_deterministic_with_golden_hash(self):
        rng = np.random.default_rng(1234)
        r = random_raster(rng, 24, 20)
        a = extract_features(r, GridSpec(6, 5))
        b = extract_features(r, GridSpec(6, 5))
        assert a.tobytes() == b.tobytes()
        digest = hashlib.sha256(a.tobytes()).hexdigest()
        assert digest == GOLDEN_FEATURE_DIGEST

    def test_grid_larger_than_raster_raises(self):
        r = Raster(width=8, height=8, values=np.zeros((8, 8)))
        with pytest.raises(ValueError):
            extract_features(r, GridSpec(9, 2))
        with pytest.raises(ValueError):
            extract_features(r, GridSpec(2, 9))

    def test_matches_direct_window_computation(self):
        # independent slow path: slice out each neighborhood explicitly
        rng = np.random.default_rng(7)
        r = random_raster(rng, 17, 13)
        grid = GridSpec(5, 3)
        feats = extract_features(r, grid)
        xe = [(c * 17) // 5 for c in range(6)]
        ye = [(q * 13) // 3 for q in range(4)]
        for row in range(3):
            for col in range(5):
                i = row * 5 + col
                x0, x1 = xe[max(col - 1, 0)], xe[min(col + 2, 5)]
                y0, y1 = ye[max(row - 1, 0)], ye[min(row + 2, 3)]
                win = r.values[y0:y1, x0:x1]
                assert feats[i, 0] == pytest.approx(win.mean(), abs=1e-12)
                assert feats[i, 1] == pytest.approx(win.var(), abs=1e-12)
                dx = np.diff(win, axis=1)
                gx = (dx * dx).mean() if dx.size else 0.0
                assert feats[i, 2] == pytest.approx(gx, abs=1e-12)
                dy = np.diff(win, axis=0)
                gy = (dy * dy).mean() if dy.size else 0.0
                assert feats[i, 3] == pytest.approx(gy, abs=1e-12)


class TestPredict:
    def test_zero_params_scores_half_boxes_at_anchors(self):
        rng = np.random.default_rng(2)
        r = random_raster(rng)
        preds = predict(zero_params(), r, "o2o")
        grid = DEFAULT_O2O_GRID
        cx, cy = grid.anchor_centers()
        for i, p in enumerate(preds):
            assert p.score == 0.5
            assert p.box.cx == pytest.approx(cx[i], abs=1e-12)
            assert p.box.cy == pytest.approx(cy[i], abs=1e-12)
            assert p.box.w == pytest.approx(grid.anchor_w, abs=1e-12)

    def test_query_counts(self):
        rng = np.random.default_rng(3)
        r = random_raster(rng)
        params = init_params(rng)
        assert len(predict(params, r, "o2o")) == 30
        assert len(predict(params, r, "o2m")) == 400

    def test_boxes_always_valid_for_wild_params(self):
        rng = np.random.default_rng(4)
        r = random_raster(rng)
        for _ in range(10):
            params = init_params(rng, scale=50.0)
            for p in predict(params, r, "o2m"):
                assert 0.0 <= p.box.cx <= 1.0
                assert 0.0 <= p.box.cy <= 1.0
                assert 0.0 < p.box.w <= 1.0
                assert 0.0 < p.box.h <= 1.0
                assert 0.0 <= p.score <= 1.0

    def test_unknown_head_raises(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError):
            predict(zero_params(), random_raster(rng), "o3o")


def end_to_end_loss(params, raster, grid, head, targets, assignment, cfg):
    preds = predict(params, raster, head, grid)
    cls = focal_cls_loss(preds, assignment, cfg)
    box = l1_reg_loss(preds, targets, assignment)
    return cfg.alpha1 * cls + cfg.alpha2 * box


def perturb_params(params, field, index, delta):
    def bump(arr):
        out = np.array(arr, dtype=np.float64, copy=True)
        out[index] += delta
        return out

    kwargs = {
        "w_score": params.w_score,
        "w_box": params.w_box,
        "b_score_o2o": params.b_score_o2o,
        "b_score_o2m": params.b_score_o2m,
        "b_box_o2o": params.b_box_o2o,
        "b_box_o2m": params.b_box_o2m,
    }
    if field in ("b_score_o2o", "b_score_o2m"):
        kwargs[field] = kwargs[field] + delta
    else:
        kwargs[field] = bump(kwargs[field])
    return DetectorParams(**kwargs)


class TestParamGradients:
    def test_zero_per_pred_grads_give_zero(self):
        rng = np.random.default_rng(6)
        r = random_raster(rng)
        params = init_params(rng)
        zero_pg = [
            type("G", (), {"d_score": 0.0, "d_box": np.zeros(4)})()
            for _ in range(30)
        ]
        g = param_gradients(r, "o2o", zero_pg, params)
        assert params_max_abs_diff(g, zero_params()) == 0.0

    def test_shape_mismatch_raises(self):
        rng = np.random.default_rng(7)
        r = random_raster(rng)
        params = init_params(rng)
        with pytest.raises(ValueError):
            param_gradients(r, "o2o", [], params)

    def test_single_active_cell_locality(self):
        rng = np.random.default_rng(8)
        r = random_raster(rng)
        params = init_params(rng)
        pg = [type("G", (), {"d_score": 0.0, "d_box": np.zeros(4)})()
              for _ in range(30)]
        pg[7] = type("G", (), {"d_score": 1.0, "d_box": np.zeros(4)})()
        g = param_gradients(r, "o2o", pg, params)
        from dualdetect.detector import standardized_features

        feats = standardized_features(extract_features(r, DEFAULT_O2O_GRID))
        # gradient must be parallel to cell 7's (standardized) feature vector
        direction = g.w_score / np.linalg.norm(g.w_score)
        feat_dir = feats[7] / np.linalg.norm(feats[7])
        assert np.allclose(np.abs(direction), np.abs(feat_dir), atol=1e-9)
        assert g.b_score_o2m == 0.0

    def test_end_to_end_finite_differences(self):
        rng = np.random.default_rng(9)
        cfg = LossConfig()
        grid = GridSpec(3, 3)
        h = 1e-5
        for _ in range(10):
            raster = random_raster(rng, 24, 24)
            params = init_params(rng, scale=0.05)
            targets = [
                GroundTruthBox(box=BBox(rng.uniform(0.25, 0.75),
                                        rng.uniform(0.25, 0.75), 0.3, 0.3))
            ]
            preds = predict(params, raster, "o2o", grid)
            assignment = one_to_one_match(preds, targets, cfg.match_weights())
            per_pred = loss_gradients(preds, targets, assignment, cfg)
            grads = param_gradients(raster, "o2o", per_pred, params, grid)

            cases = [("w_score", (0,)), ("w_score", (3,)),
                     ("w_box", (0, 1)), ("w_box", (2, 4)),
                     ("b_score_o2o", None), ("b_box_o2o", (1,)),
                     ("b_box_o2o", (3,))]
            for field, index in cases:
                up = perturb_params(params, field, index, +h)
                dn = perturb_params(params, field, index, -h)
                fd = (
                    end_to_end_loss(up, raster, grid, "o2o", targets, assignment, cfg)
                    - end_to_end_loss(dn, raster, grid, "o2o", targets, assignment, cfg)
                ) / (2 * h)
                got = getattr(grads, field)
                got = got if index is None else got[index]
                # skip kink/clamp-adjacent points, everything else must agree
                if abs(fd) < 1e-9 and abs(float(got)) < 1e-9:
                    continue
                assert float(got) == pytest.approx(fd, rel=1e-4, abs=1e-7), (
                    field, index
                )


class TestSgdAndEma:
    def test_sgd_zero_lr(self):
        rng = np.random.default_rng(10)
        params = init_params(rng)
        grads = init_params(rng)
        assert params_max_abs_diff(sgd_step(params, grads, 0.0), params) == 0.0

    def test_sgd_zero_grads(self):
        rng = np.random.default_rng(11)
        params = init_params(rng)
        assert params_max_abs_diff(sgd_step(params, zero_params(), 0.3), params) == 0.0

    def test_sgd_hand_value(self):
        params = map_params(lambda x: x * 0.0 + 1.0, zero_params())
        grads = map_params(lambda x: x * 0.0 + 0.5, zero_params())
        stepped = sgd_step(params, grads, 0.1)
        assert stepped.w_score[0] == pytest.approx(0.95)
        assert stepped.b_score_o2o == pytest.approx(0.95)

    def test_ema_fixed_point(self):
        rng = np.random.default_rng(12)
        params = init_params(rng)
        assert params_max_abs_diff(ema_update(params, params, 0.999), params) < 1e-15

    def test_ema_hand_value(self):
        teacher = zero_params()
        student = map_params(lambda x: x * 0.0 + 1.0, zero_params())
        updated = ema_update(teacher, student, 0.999)
        assert updated.w_score[0] == pytest.approx(0.001)

    def test_ema_contraction_exact_with_zero_student(self):
        # with the student frozen at zero the max-norm distance after each
        # update is exactly momentum * previous distance (rounding is
        # monotone, so scaling commutes with the max)
        rng = np.random.default_rng(13)
        teacher = init_params(rng, scale=1.0)
        student = zero_params()
        m = 0.97
        dist = params_max_abs_diff(teacher, student)
        for _ in range(200):
            teacher = ema_update(teacher, student, m)
            new_dist = params_max_abs_diff(teacher, student)
            assert new_dist == m * dist
            dist = new_dist

    def test_ema_geometric_decay_general_student(self):
        rng = np.random.default_rng(14)
        teacher = init_params(rng, scale=1.0)
        student = init_params(rng, scale=1.0)
        m = 0.9
        d0 = params_max_abs_diff(teacher, student)
        t = teacher
        for n in range(1, 50):
            t = ema_update(t, student, m)
            assert params_max_abs_diff(t, student) == pytest.approx(
                d0 * m ** n, rel=1e-9
            )

    def test_momentum_validation(self):
        rng = np.random.default_rng(15)
        p = init_params(rng)
        with pytest.raises(ValueError):
            ema_update(p, p, 1.0)
        with pytest.raises(ValueError):
            ema_update(p, p, -0.1)

    def test_shape_mismatch_raises(self):
        rng = np.random.default_rng(16)
        a = init_params(rng, feature_dim=5)
        b = init_params(rng, feature_dim=6)
        with pytest.raises(ValueError):
            ema_update(a, b, 0.9)
        with pytest.raises(ValueError):
            sgd_step(a, b, 0.1)


class TestCheckpoints:
    def test_round_trip_is_value_exact(self, tmp_path):
        rng = np.random.default_rng(17)
        params = init_params(rng, scale=3.14159)
        path = tmp_path / "ckpt.json"
        write_checkpoint(path, params, config={"seed": 7, "note": "test"})
        loaded, config = load_checkpoint(path)
        assert params_max_abs_diff(loaded, params) == 0.0
        assert config == {"seed": 7, "note": "test"}

    def test_serialization_is_stable(self):
        rng = np.random.default_rng(18)
        params = init_params(rng)
        text = params_to_json(params, {"a": 1})
        again_params, _ = params_from_json(text)
        assert params_to_json(again_params, {"a": 1}) == text

    def test_flat_field_layout(self):
        payload = json.loads(params_to_json(zero_params(), {"k": 2}))
        assert set(payload) == {
            "w_score", "w_box", "b_score_o2o", "b_score_o2m",
            "b_box_o2o", "b_box_o2m", "config",
        }
        assert len(payload["w_box"]) == 20
        assert payload["config"] == {"k": 2}


GOLDEN_FEATURE_DIGEST = (
    "e99891a1a7186fa560964a16f19651dd4cbea69be00d1843ad9936239a807346"
)
