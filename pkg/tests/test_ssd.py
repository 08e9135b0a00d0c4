"""Tests for the SSD detector: anchors, codec, matching, loss, NMS, training."""

import json

import numpy as np
import pytest

from satdet.boxes import BoundingBox, Detection, iou
from satdet.errors import ConfigError, DataError, ShapeError
from satdet.scene import SceneConfig, TrackingMode, generate_scene
from satdet.data import write_frames
from satdet.ssd import (
    LABEL_IGNORE,
    LABEL_NEGATIVE,
    AnchorConfig,
    DetectorModel,
    Precision,
    SizeClass,
    TrainConfig,
    anchors_as_corners,
    build_anchors,
    build_detector,
    decode_box,
    decode_boxes,
    detect,
    encode_box,
    encode_boxes,
    load_checkpoint,
    match_anchors,
    nms,
    preprocess,
    read_sidecar,
    save_checkpoint,
    sidecar_path,
    ssd_loss,
    train,
)

SMALL_ANCHORS = AnchorConfig(
    feature_map_strides=(8, 16),
    anchor_scales_px=((8.0, 14.0), (24.0, 40.0)),
)


class TestAnchors:
    def test_four_by_four_single_scale_example(self):
        cfg = AnchorConfig(feature_map_strides=(4,), anchor_scales_px=((10.0,),),
                           aspect_ratios=(1.0,))
        anchors = build_anchors(cfg, (16, 16))
        assert anchors.shape == (16, 4)
        # row-major: x varies fastest; centers at (stride * (j + 0.5))
        assert anchors[0].tolist() == [2.0, 2.0, 10.0, 10.0]
        assert anchors[1].tolist() == [6.0, 2.0, 10.0, 10.0]
        assert anchors[4].tolist() == [2.0, 6.0, 10.0, 10.0]
        assert anchors[15].tolist() == [14.0, 14.0, 10.0, 10.0]

    def test_small_config_count_at_256(self):
        anchors = build_anchors(SMALL_ANCHORS, (256, 256))
        # (32*32 + 16*16) cells * 2 scales * 3 ratios
        assert len(anchors) == 7680

    def test_ratio_one_anchors_are_squares(self):
        cfg = AnchorConfig(feature_map_strides=(8,), anchor_scales_px=((12.0,),),
                           aspect_ratios=(1.0,))
        anchors = build_anchors(cfg, (64, 64))
        assert np.all(anchors[:, 2] == 12.0)
        assert np.all(anchors[:, 3] == 12.0)

    def test_aspect_ratio_geometry(self):
        cfg = AnchorConfig(feature_map_strides=(8,), anchor_scales_px=((12.0,),),
                           aspect_ratios=(4.0,))
        anchors = build_anchors(cfg, (64, 64))
        # w = s * sqrt(r), h = s / sqrt(r); area preserved at s^2
        assert np.allclose(anchors[:, 2], 24.0)
        assert np.allclose(anchors[:, 3], 6.0)
        assert np.allclose(anchors[:, 2] * anchors[:, 3], 144.0)

    def test_ordering_cells_then_scales_then_ratios(self):
        cfg = AnchorConfig(feature_map_strides=(32,), anchor_scales_px=((8.0, 14.0),),
                           aspect_ratios=(1.0, 4.0))
        anchors = build_anchors(cfg, (64, 64))
        assert anchors.shape == (2 * 2 * 2 * 2, 4)
        first_cell = anchors[:4]
        assert first_cell[:, 0].tolist() == [16.0] * 4  # same center
        # scale-major, then ratio
        assert first_cell[:, 2].tolist() == [8.0, 16.0, 14.0, 28.0]

    def test_stride_groups_concatenate_in_order(self):
        anchors = build_anchors(SMALL_ANCHORS, (256, 256))
        n_first = 32 * 32 * 6
        assert set(np.unique(anchors[:n_first, 0])) <= {8 * (j + 0.5) for j in range(32)}
        assert anchors[n_first, 0] == 8.0  # first stride-16 center

    def test_partial_cells_round_up(self):
        cfg = AnchorConfig(feature_map_strides=(16,), anchor_scales_px=((8.0,),),
                           aspect_ratios=(1.0,))
        anchors = build_anchors(cfg, (40, 24))  # ceil(40/16)=3, ceil(24/16)=2
        assert len(anchors) == 6

    def test_oversized_anchor_rejected(self):
        cfg = AnchorConfig(feature_map_strides=(8,), anchor_scales_px=((80.0,),),
                           aspect_ratios=(1.0,))
        with pytest.raises(ConfigError):
            build_anchors(cfg, (64, 64))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            AnchorConfig(feature_map_strides=(8, 16), anchor_scales_px=((8.0,),))
        with pytest.raises(ConfigError):
            AnchorConfig(feature_map_strides=(), anchor_scales_px=())

    def test_config_dict_round_trip(self):
        assert AnchorConfig.from_dict(SMALL_ANCHORS.to_dict()) == SMALL_ANCHORS

    def test_corners_match_centers(self):
        anchors = np.array([[10.0, 20.0, 4.0, 8.0]])
        corners = anchors_as_corners(anchors)
        assert corners[0].tolist() == [8.0, 16.0, 12.0, 24.0]


class TestBoxCodec:
    def test_identity_encoding_is_zero(self):
        anchors = np.array([[10.0, 10.0, 4.0, 4.0]])
        gt = np.array([[8.0, 8.0, 12.0, 12.0]])  # same box in corners
        t = encode_boxes(gt, anchors)
        assert np.allclose(t, 0.0)

    def test_known_offsets(self):
        anchors = np.array([[10.0, 10.0, 4.0, 4.0]])
        gt = np.array([[10.0, 10.0, 14.0, 14.0]])  # center (12,12), same size
        t = encode_boxes(gt, anchors)[0]
        assert np.allclose(t, [0.5, 0.5, 0.0, 0.0])

    def test_size_offsets_are_log_ratios(self):
        anchors = np.array([[10.0, 10.0, 4.0, 4.0]])
        gt = np.array([[6.0, 8.0, 14.0, 12.0]])  # 8 wide, 4 tall, same center
        t = encode_boxes(gt, anchors)[0]
        assert np.allclose(t, [0.0, 0.0, np.log(2.0), 0.0])

    def test_round_trip_thousand_pairs(self):
        rng = np.random.default_rng(42)
        n = 1000
        anchors = np.column_stack([
            rng.uniform(5, 250, n), rng.uniform(5, 250, n),
            rng.uniform(2, 60, n), rng.uniform(2, 60, n),
        ])
        x0 = rng.uniform(0, 200, n)
        y0 = rng.uniform(0, 200, n)
        gt = np.column_stack([x0, y0, x0 + rng.uniform(0.5, 50, n),
                              y0 + rng.uniform(0.5, 50, n)])
        back = decode_boxes(encode_boxes(gt, anchors), anchors)
        assert np.abs(back - gt).max() < 1e-9

    def test_decode_clamps_wild_log_sizes(self):
        anchors = np.array([[10.0, 10.0, 4.0, 4.0]])
        out = decode_boxes(np.array([[0.0, 0.0, 50.0, -50.0]]), anchors)[0]
        assert out[2] - out[0] == pytest.approx(4.0 * np.exp(10.0))
        assert out[3] - out[1] == pytest.approx(4.0 * np.exp(-10.0))
        assert np.all(np.isfinite(out))

    def test_single_box_wrappers(self):
        anchor = (10.0, 10.0, 4.0, 4.0)
        box = BoundingBox(7.0, 8.0, 13.0, 14.0)
        t = encode_box(box, anchor)
        back = decode_box(t, anchor)
        assert np.allclose(back.as_tuple(), box.as_tuple())

    def test_pairing_mismatch_raises(self):
        with pytest.raises(ShapeError):
            encode_boxes(np.zeros((3, 4)), np.ones((2, 4)))
        with pytest.raises(ShapeError):
            decode_boxes(np.zeros((3, 4)), np.ones((2, 4)))

    def test_degenerate_gt_rejected(self):
        anchors = np.array([[10.0, 10.0, 4.0, 4.0]])
        with pytest.raises(ConfigError):
            encode_boxes(np.array([[5.0, 5.0, 5.0, 9.0]]), anchors)


class TestMatching:
    ANCHORS = np.array([
        [100.0, 100.0, 10.0, 10.0],
        [104.0, 100.0, 10.0, 10.0],
        [200.0, 200.0, 10.0, 10.0],
    ])

    def test_no_gt_all_negative(self):
        labels = match_anchors(np.zeros((0, 4)), self.ANCHORS)
        assert np.all(labels == LABEL_NEGATIVE)

    def test_exact_match_positive(self):
        gt = np.array([[95.0, 95.0, 105.0, 105.0]])  # anchor 0 exactly
        labels = match_anchors(gt, self.ANCHORS)
        assert labels[0] == 0
        assert labels[2] == LABEL_NEGATIVE

    def test_ignore_band_between_thresholds(self):
        # gt equal to anchor 1; anchor 0 then overlaps at IoU 60/140 ~ 0.43
        gt = np.array([[99.0, 95.0, 109.0, 105.0]])
        labels = match_anchors(gt, self.ANCHORS, iou_pos=0.5, iou_neg=0.4)
        assert labels[1] == 0
        assert labels[0] == LABEL_IGNORE
        assert labels[2] == LABEL_NEGATIVE

    def test_faint_overlap_still_forces_one_positive(self):
        gt = np.array([[97.0, 97.0, 101.0, 101.0]])  # 4x4: IoU ~ 0.13 with anchor 0
        labels = match_anchors(gt, self.ANCHORS)
        assert (labels >= 0).sum() == 1
        assert labels[0] == 0

    def test_two_targets_get_distinct_anchors(self):
        gt = np.array([[95.0, 95.0, 105.0, 105.0], [195.0, 195.0, 205.0, 205.0]])
        labels = match_anchors(gt, self.ANCHORS)
        assert labels[0] == 0
        assert labels[2] == 1

    def test_threshold_ordering_enforced(self):
        with pytest.raises(ConfigError):
            match_anchors(np.zeros((0, 4)), self.ANCHORS, iou_pos=0.3, iou_neg=0.5)


class TestLoss:
    def _one_positive(self, n=50):
        labels = np.full((1, n), LABEL_NEGATIVE, dtype=np.int64)
        labels[0, 7] = 0
        targets = np.zeros((1, n, 4))
        return labels, targets

    def test_perfect_predictions_near_zero(self):
        labels, targets = self._one_positive()
        logits = np.where(labels >= 0, 30.0, -30.0)
        loss, dlogits, doffsets = ssd_loss(logits, targets.copy(), labels, targets)
        assert loss < 1e-3
        assert np.abs(dlogits).max() < 1e-3
        assert np.allclose(doffsets, 0.0)

    def test_hard_negative_mining_count(self):
        labels, targets = self._one_positive()
        logits = np.zeros((1, 50))
        _, dlogits, _ = ssd_loss(logits, targets.copy(), labels, targets,
                                 neg_pos_ratio=3)
        assert int((dlogits != 0).sum()) == 1 + 3

    def test_no_positives_still_learns_from_negatives(self):
        labels = np.full((1, 20), LABEL_NEGATIVE, dtype=np.int64)
        targets = np.zeros((1, 20, 4))
        logits = np.full((1, 20), 2.0)
        loss, dlogits, doffsets = ssd_loss(logits, targets.copy(), labels, targets)
        assert np.isfinite(loss) and loss > 0
        assert int((dlogits != 0).sum()) == 3  # ratio * max(1, 0)
        assert np.allclose(doffsets, 0.0)

    def test_smooth_l1_quadratic_region(self):
        labels, targets = self._one_positive()
        logits = np.where(labels >= 0, 30.0, -30.0)
        offsets = targets.copy()
        offsets[0, 7] = 0.5  # |d| < 1: 0.5 * d^2 each coordinate
        loss, _, doffs = ssd_loss(logits, offsets, labels, targets)
        assert loss == pytest.approx(4 * 0.5 * 0.25, abs=1e-6)
        assert np.allclose(doffs[0, 7], 0.5)

    def test_smooth_l1_linear_region(self):
        labels, targets = self._one_positive()
        logits = np.where(labels >= 0, 30.0, -30.0)
        offsets = targets.copy()
        offsets[0, 7] = 2.0  # |d| >= 1: |d| - 0.5 each coordinate
        loss, _, doffs = ssd_loss(logits, offsets, labels, targets)
        assert loss == pytest.approx(4 * 1.5, abs=1e-6)
        assert np.allclose(doffs[0, 7], 1.0)

    def test_normalized_by_positive_count(self):
        labels = np.full((1, 40), LABEL_NEGATIVE, dtype=np.int64)
        labels[0, :4] = 0
        targets = np.zeros((1, 40, 4))
        logits = np.where(labels >= 0, 30.0, -30.0)
        offsets = targets.copy()
        offsets[0, :4] = 2.0
        loss, _, _ = ssd_loss(logits, offsets, labels, targets)
        assert loss == pytest.approx(4 * 4 * 1.5 / 4, abs=1e-6)

    def test_ignored_anchors_contribute_nothing(self):
        labels, targets = self._one_positive()
        logits = np.where(labels >= 0, 30.0, -30.0)
        labels2 = labels.copy()
        labels2[0, 11] = LABEL_IGNORE
        logits2 = logits.copy()
        logits2[0, 11] = 17.0  # would be a huge negative loss if counted
        loss1 = ssd_loss(logits, targets.copy(), labels, targets)[0]
        loss2, dlogits, _ = ssd_loss(logits2, targets.copy(), labels2, targets)
        assert loss2 == pytest.approx(loss1, abs=1e-9)
        assert dlogits[0, 11] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ssd_loss(np.zeros((1, 5)), np.zeros((1, 6, 4)),
                     np.zeros((1, 5), dtype=np.int64), np.zeros((1, 6, 4)))


def _brute_force_nms(detections, iou_threshold):
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].confidence, i))
    kept = []
    for i in order:
        if all(iou(detections[i].box, detections[k].box) < iou_threshold
               for k in kept):
            kept.append(i)
    return [detections[i] for i in kept]


class TestNMS:
    def test_empty_and_single(self):
        assert nms([]) == []
        d = [Detection(BoundingBox(0, 0, 10, 10), 0.9)]
        assert nms(d) == d

    def test_duplicate_suppressed(self):
        dets = [Detection(BoundingBox(0, 0, 10, 10), 0.7),
                Detection(BoundingBox(1, 0, 11, 10), 0.9)]
        kept = nms(dets, iou_threshold=0.45)
        assert len(kept) == 1
        assert kept[0].confidence == 0.9

    def test_disjoint_boxes_all_kept(self):
        dets = [Detection(BoundingBox(i * 20, 0, i * 20 + 10, 10), 0.5 + 0.01 * i)
                for i in range(5)]
        assert len(nms(dets)) == 5

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        dets = []
        for _ in range(60):
            x0, y0 = rng.uniform(0, 80, 2)
            w, h = rng.uniform(2, 30, 2)
            dets.append(Detection(BoundingBox(x0, y0, x0 + w, y0 + h),
                                  float(rng.uniform(0, 1))))
        for thr in (0.3, 0.45, 0.6):
            ours = nms(dets, iou_threshold=thr)
            ref = _brute_force_nms(dets, thr)
            assert [d.box.as_tuple() for d in ours] == [d.box.as_tuple() for d in ref]

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        dets = [Detection(BoundingBox(x, y, x + 8, y + 8), float(c) / 50.0)
                for x, y, c in rng.uniform(0, 50, (30, 3))]
        once = nms(dets, 0.45)
        assert nms(once, 0.45) == once

    def test_output_sorted_by_confidence(self):
        rng = np.random.default_rng(9)
        dets = [Detection(BoundingBox(x, y, x + 8, y + 8), float(c) / 50.0)
                for x, y, c in rng.uniform(0, 50, (20, 3))]
        kept = nms(dets, 0.45)
        confs = [d.confidence for d in kept]
        assert confs == sorted(confs, reverse=True)


class TestModel:
    def test_small_forward_shapes(self):
        model = build_detector(SizeClass.SMALL, input_size=(96, 96), seed=0)
        x = np.random.default_rng(0).uniform(0, 1, (2, 1, 96, 96))
        offsets, logits = model.forward(x)
        n_anchors = (12 * 12 + 6 * 6) * 6
        assert offsets.shape == (2, n_anchors, 4)
        assert logits.shape == (2, n_anchors)

    def test_anchor_counts_match_spec(self):
        small = build_detector(SizeClass.SMALL, input_size=(256, 256))
        large = build_detector(SizeClass.LARGE, input_size=(256, 256))
        assert len(small.anchors) == 7680
        assert len(large.anchors) == (64 * 64 + 32 * 32 + 16 * 16) * 6 == 32256

    def test_large_has_more_parameters(self):
        small = build_detector(SizeClass.SMALL, input_size=(96, 96))
        large = build_detector(SizeClass.LARGE, input_size=(96, 96))
        count = lambda m: sum(p.value.size for p in m.params())
        assert count(large) > 2 * count(small)

    def test_objectness_bias_starts_low(self):
        model = build_detector(SizeClass.SMALL, input_size=(96, 96), seed=0)
        x = np.random.default_rng(1).uniform(0, 0.1, (1, 1, 96, 96))
        _, logits = model.forward(x)
        # freshly initialized model should call (almost) everything background
        assert np.median(logits) < -2.0

    def test_same_seed_same_outputs(self):
        x = np.random.default_rng(2).uniform(0, 1, (1, 1, 96, 96))
        a = build_detector(SizeClass.SMALL, input_size=(96, 96), seed=5).forward(x)
        b = build_detector(SizeClass.SMALL, input_size=(96, 96), seed=5).forward(x)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        c = build_detector(SizeClass.SMALL, input_size=(96, 96), seed=6).forward(x)
        assert not np.array_equal(a[1], c[1])

    def test_input_shape_validated(self):
        model = build_detector(SizeClass.SMALL, input_size=(96, 96))
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 1, 64, 64)))
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 3, 96, 96)))

    def test_preprocess_scales_and_resizes(self):
        pixels = np.full((100, 80), 65535, dtype=np.uint16)
        x = preprocess(pixels, (64, 64))
        assert x.shape == (1, 1, 64, 64)
        assert np.allclose(x, 1.0)
        with pytest.raises(DataError):
            preprocess(np.zeros((4, 4, 3), dtype=np.uint16), (64, 64))

    def test_state_tensor_round_trip(self):
        model = build_detector(SizeClass.SMALL, input_size=(96, 96), seed=0)
        other = build_detector(SizeClass.SMALL, input_size=(96, 96), seed=9)
        other.load_state_tensors(model.state_tensors())
        x = np.random.default_rng(3).uniform(0, 1, (1, 1, 96, 96))
        a = model.forward(x)
        b = other.forward(x)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_load_state_rejects_bad_sets(self):
        model = build_detector(SizeClass.SMALL, input_size=(96, 96))
        state = model.state_tensors()
        missing = dict(state)
        missing.pop(next(iter(missing)))
        with pytest.raises(DataError):
            model.load_state_tensors(missing)
        extra = dict(state)
        extra["bogus"] = np.zeros(3)
        with pytest.raises(DataError):
            model.load_state_tensors(extra)
        wrong = dict(state)
        first = next(iter(wrong))
        wrong[first] = np.zeros((1, 2, 3))
        with pytest.raises(DataError):
            model.load_state_tensors(wrong)


class TestDetect:
    def _model(self):
        return build_detector(SizeClass.SMALL, input_size=(96, 96), seed=0)

    def test_boxes_inside_frame(self):
        model = self._model()
        pixels = np.random.default_rng(0).integers(0, 3000, (100, 90)).astype(np.uint16)
        dets = detect(model, pixels, confidence_threshold=0.0, nms_iou=0.45)
        assert dets
        for d in dets:
            b = d.box
            assert 0 <= b.x_min < b.x_max <= 90
            assert 0 <= b.y_min < b.y_max <= 100

    def test_threshold_monotonicity(self):
        model = self._model()
        pixels = np.random.default_rng(1).integers(0, 3000, (64, 64)).astype(np.uint16)
        counts = [len(detect(model, pixels, confidence_threshold=t))
                  for t in (0.0, 0.005, 0.02, 0.5)]
        assert counts == sorted(counts, reverse=True)

    def test_impossible_threshold_empty(self):
        model = self._model()
        pixels = np.zeros((64, 64), dtype=np.uint16)
        assert detect(model, pixels, confidence_threshold=1.0) == []

    def test_detections_sorted_and_confident(self):
        model = self._model()
        pixels = np.random.default_rng(2).integers(0, 60000, (64, 64)).astype(np.uint16)
        dets = detect(model, pixels, confidence_threshold=0.001)
        confs = [d.confidence for d in dets]
        assert confs == sorted(confs, reverse=True)
        assert all(c >= 0.001 for c in confs)


class TestTrainConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.epochs == 40 and cfg.batch_size == 8

    @pytest.mark.parametrize("kwargs", [
        {"epochs": 0},
        {"batch_size": 0},
        {"learning_rate": 0.0},
        {"learning_rate": -1e-3},
        {"neg_pos_ratio": -1},
        {"iou_pos_threshold": 0.3, "iou_neg_threshold": 0.5},
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


def _tiny_dataset(tmp_path, n_train=6, n_val=2, mode=TrackingMode.RATE_TRACK):
    base = SceneConfig(width_px=64, height_px=64, tracking_mode=mode,
                       star_count=2, star_mag_range=(9.0, 10.0),
                       rso_count=1, rso_mag_range=(6.5, 7.0),
                       streak_length_px=16.0, streak_angle_rad=0.5,
                       psf_sigma_px=1.5, background_level=100.0,
                       read_noise_sigma=2.0, seed=0)
    from dataclasses import replace
    frames = [generate_scene(replace(base, seed=100 + i))
              for i in range(n_train + n_val)]
    train_dir = tmp_path / f"train_{mode.value}"
    val_dir = tmp_path / f"val_{mode.value}"
    write_frames(frames[:n_train], train_dir)
    write_frames(frames[n_train:], val_dir)
    return train_dir / "manifest.json", val_dir / "manifest.json"


class TestTraining:
    def test_run_is_deterministic(self, tmp_path):
        train_m, val_m = _tiny_dataset(tmp_path)
        cfg = TrainConfig(epochs=2, batch_size=3, seed=1)
        _, log1 = train(train_m, val_m, SizeClass.SMALL, cfg, input_size=(96, 96))
        _, log2 = train(train_m, val_m, SizeClass.SMALL, cfg, input_size=(96, 96))
        assert [e["train_loss"] for e in log1] == [e["train_loss"] for e in log2]
        assert len(log1) == 2
        for e in log1:
            assert np.isfinite(e["train_loss"]) and e["train_loss"] > 0
            assert 0.0 <= e["val_f1"] <= 1.0

    def test_loss_decreases_over_epochs(self, tmp_path):
        train_m, val_m = _tiny_dataset(tmp_path)
        cfg = TrainConfig(epochs=5, batch_size=3, seed=0, learning_rate=2e-3)
        _, log = train(train_m, val_m, SizeClass.SMALL, cfg, input_size=(96, 96))
        losses = [e["train_loss"] for e in log]
        assert losses[-1] < losses[0]

    def test_mode_mismatch_rejected(self, tmp_path):
        train_m, _ = _tiny_dataset(tmp_path, mode=TrackingMode.RATE_TRACK)
        _, val_m = _tiny_dataset(tmp_path, mode=TrackingMode.SIDEREAL)
        with pytest.raises(DataError):
            train(train_m, val_m, SizeClass.SMALL, TrainConfig(epochs=1),
                  input_size=(96, 96))

    def test_early_stop_truncates_log(self, tmp_path):
        train_m, val_m = _tiny_dataset(tmp_path)
        cfg = TrainConfig(epochs=4, batch_size=3, seed=1, early_stop_f1=0.0)
        _, log = train(train_m, val_m, SizeClass.SMALL, cfg, input_size=(96, 96))
        assert len(log) == 1  # any F1 >= 0.0 stops after the first epoch


class TestCheckpoints:
    def _model(self):
        return build_detector(SizeClass.SMALL, input_size=(96, 96), seed=3,
                              tracking_mode=TrackingMode.RATE_TRACK)

    def test_round_trip(self, tmp_path):
        model = self._model()
        path = tmp_path / "model.sdtn"
        save_checkpoint(model, path)
        assert path.exists() and sidecar_path(path).exists()
        loaded = load_checkpoint(path)
        assert loaded.size_class is SizeClass.SMALL
        assert loaded.input_size == (96, 96)
        assert loaded.tracking_mode is TrackingMode.RATE_TRACK
        assert loaded.precision is Precision.FLOAT
        ours = model.state_tensors()
        theirs = loaded.state_tensors()
        assert ours.keys() == theirs.keys()
        for name in ours:
            # payloads are float32, so loaded weights match to f32 precision
            assert np.array_equal(ours[name].astype(np.float32),
                                  theirs[name].astype(np.float32)), name

    def test_sidecar_contents(self, tmp_path):
        path = tmp_path / "model.sdtn"
        save_checkpoint(self._model(), path)
        meta = read_sidecar(path)
        assert meta["format"] == "satdet-detector"
        assert meta["precision"] == "float"
        assert meta["size_class"] == "small"
        assert meta["input_size"] == [96, 96]
        assert meta["tracking_mode"] == "rate_track"
        assert "anchor_config" in meta

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_checkpoint(tmp_path / "nope.sdtn")

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "model.sdtn"
        save_checkpoint(self._model(), path)
        sidecar_path(path).unlink()
        with pytest.raises(DataError, match="sidecar"):
            load_checkpoint(path)

    def test_corrupt_sidecar(self, tmp_path):
        path = tmp_path / "model.sdtn"
        save_checkpoint(self._model(), path)
        sidecar_path(path).write_text("{not json")
        with pytest.raises(DataError, match="JSON"):
            load_checkpoint(path)

    def test_wrong_format_field(self, tmp_path):
        path = tmp_path / "model.sdtn"
        save_checkpoint(self._model(), path)
        meta = json.loads(sidecar_path(path).read_text())
        meta["format"] = "something-else"
        sidecar_path(path).write_text(json.dumps(meta))
        with pytest.raises(DataError, match="format"):
            load_checkpoint(path)

    def test_anchor_mismatch_detected(self, tmp_path):
        path = tmp_path / "model.sdtn"
        save_checkpoint(self._model(), path)
        meta = json.loads(sidecar_path(path).read_text())
        meta["anchor_config"]["feature_map_strides"] = [4, 8]
        sidecar_path(path).write_text(json.dumps(meta))
        with pytest.raises(DataError, match="anchor"):
            load_checkpoint(path)

    def test_quantized_precision_rejected_by_float_loader(self, tmp_path):
        path = tmp_path / "model.sdtn"
        save_checkpoint(self._model(), path)
        meta = json.loads(sidecar_path(path).read_text())
        meta["precision"] = "int8"
        sidecar_path(path).write_text(json.dumps(meta))
        with pytest.raises(DataError, match="quantized loader"):
            load_checkpoint(path)
