import logging
import math

import numpy as np
import pytest

from latentdepth.core_types import DepthMap, RgbImage, RgbdSample
from latentdepth.metrics_eval import (
    GARG_CROP,
    EvalProtocolConfig,
    MetricsReport,
    compute_metrics,
    evaluate_split,
    format_report_table,
    garg_crop_mask,
    load_report,
    predict_depth,
    report_from_dict,
    report_to_dict,
    save_report,
    split_flip_fuse_predict,
)
from _oracles import scalar_metrics_oracle

PROTO_DIRECT = EvalProtocolConfig(use_garg_crop=False, flip_augment=False, use_split_fuse=False)


def _random_case(rng, h=None, w=None):
    h = h or int(rng.integers(16, 129))
    w = w or int(rng.integers(16, 129))
    gt = rng.uniform(0.5, 90.0, size=(h, w))
    pred = np.clip(gt * rng.uniform(0.5, 2.0, size=(h, w))
                   + rng.normal(0, 1.0, size=(h, w)), 1e-4, 120.0)
    mask = rng.random((h, w)) < 0.7
    if not mask.any():
        mask[0, 0] = True
    return pred, gt, mask


class TestComputeMetrics:
    def test_hand_vector(self):
        gt = np.array([[1.0, 2.0, 4.0]])
        pred = np.array([[1.0, 2.4, 8.0]])
        mask = np.ones((1, 3), dtype=bool)
        r = compute_metrics(pred, gt, mask)
        # ratios 1.0, 1.2, 2.0; thresholds 1.25, 1.5625, 1.953125, all strict,
        # so the 2.0 ratio fails even delta3
        assert abs(r.delta1 - 2 / 3) < 1e-12
        assert abs(r.delta2 - 2 / 3) < 1e-12
        assert abs(r.delta3 - 2 / 3) < 1e-12
        assert abs(r.rmse - math.sqrt((0.0 + 0.16 + 16.0) / 3)) < 1e-12
        assert abs(r.abs_rel - (0.0 + 0.2 + 1.0) / 3) < 1e-12
        assert abs(r.sq_rel - (0.0 + 0.16 / 2 + 16.0 / 4) / 3) < 1e-12
        assert r.n_valid == 3 and r.n_samples == 1

    def test_threshold_is_strict(self):
        gt = np.array([[1.25]])
        pred = np.array([[1.0]])
        r = compute_metrics(pred, gt, np.ones((1, 1), dtype=bool))
        assert r.delta1 == 0.0  # ratio exactly 1.25 does not count

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            pred, gt, mask = _random_case(rng)
            r = compute_metrics(pred, gt, mask)
            want = scalar_metrics_oracle(pred, gt, mask)
            for k, v in want.items():
                got = getattr(r, k)
                assert abs(got - v) <= 1e-9 * max(1.0, abs(v)), k

    def test_delta_nesting_and_ranges(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            pred, gt, mask = _random_case(rng)
            r = compute_metrics(pred, gt, mask)
            assert 0.0 <= r.delta1 <= r.delta2 <= r.delta3 <= 1.0
            assert r.rmse >= 0 and r.abs_rel >= 0 and r.sq_rel >= 0

    def test_perfect_prediction(self):
        rng = np.random.default_rng(2)
        gt = rng.uniform(1.0, 50.0, size=(16, 16))
        r = compute_metrics(gt.copy(), gt, np.ones_like(gt, dtype=bool))
        assert r.delta1 == 1.0 and r.rmse == 0.0 and r.abs_rel == 0.0

    def test_worse_prediction_scores_worse(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(2.0, 40.0, size=(32, 32))
        mask = np.ones_like(gt, dtype=bool)
        near = compute_metrics(gt * 1.05, gt, mask)
        far = compute_metrics(gt * 1.8, gt, mask)
        assert near.delta1 > far.delta1
        assert near.abs_rel < far.abs_rel
        assert near.rmse < far.rmse

    def test_pixel_permutation_invariant(self):
        rng = np.random.default_rng(4)
        pred, gt, mask = _random_case(rng, h=24, w=24)
        r1 = compute_metrics(pred, gt, mask)
        perm = rng.permutation(24 * 24)
        r2 = compute_metrics(pred.ravel()[perm].reshape(24, 24),
                             gt.ravel()[perm].reshape(24, 24),
                             mask.ravel()[perm].reshape(24, 24))
        for k in ("delta1", "delta2", "delta3", "rmse", "abs_rel", "sq_rel"):
            assert abs(getattr(r1, k) - getattr(r2, k)) < 1e-12

    def test_prediction_clamped_to_cap(self):
        gt = np.array([[50.0]])
        pred = np.array([[500.0]])
        r = compute_metrics(pred, gt, np.ones((1, 1), dtype=bool), depth_cap=80.0)
        assert abs(r.rmse - 30.0) < 1e-12  # clamped to 80 before comparison

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError):
            compute_metrics(np.ones((4, 4)), np.ones((4, 4)), np.zeros((4, 4), dtype=bool))

    def test_nonpositive_gt_raises(self):
        gt = np.array([[0.0]])
        with pytest.raises(ValueError):
            compute_metrics(np.ones((1, 1)), gt, np.ones((1, 1), dtype=bool))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            compute_metrics(np.ones((4, 4)), np.ones((4, 5)), np.ones((4, 4), dtype=bool))


class TestGargCrop:
    def test_reference_bounds_375x1242(self):
        mask = garg_crop_mask(375, 1242)
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        assert rows[0] == 153 and rows[-1] == 371 - 1
        assert cols[0] == 44 and cols[-1] == 1197 - 1

    def test_area_fraction(self):
        mask = garg_crop_mask(375, 1242)
        frac = float(mask.mean())
        assert abs(frac - 0.5418) / 0.5418 < 0.005

    def test_fraction_stable_across_sizes(self):
        for h, w in ((64, 64), (128, 256), (375, 1242)):
            frac = float(garg_crop_mask(h, w).mean())
            assert 0.50 <= frac <= 0.58

    def test_degenerate_sizes_raise(self):
        with pytest.raises(ValueError):
            garg_crop_mask(0, 100)
        with pytest.raises(ValueError):
            garg_crop_mask(1, 1)

    def test_constants_sane(self):
        top, bottom, left, right = GARG_CROP
        assert 0 < top < bottom <= 1 and 0 < left < right <= 1


class _ConstantPredictor:
    pad_multiple = 1

    def __init__(self, value):
        self.value = value

    def predict(self, image):
        return np.full(image.data.shape[1:], self.value, dtype=np.float32)


class _ShapeRecordingPredictor(_ConstantPredictor):
    def __init__(self, value=5.0):
        super().__init__(value)
        self.seen = []

    def predict(self, image):
        self.seen.append(image.data.shape[1:])
        return super().predict(image)


class _RChannelPredictor:
    """Depth = 10 * red channel; content-dependent but deterministic."""

    pad_multiple = 1

    def predict(self, image):
        return (10.0 * image.data[0]).astype(np.float32)


def _image(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return RgbImage(rng.uniform(0.1, 1.0, size=(3, h, w)).astype(np.float32))


class TestSplitFuse:
    def test_constant_predictor_gives_constant(self):
        cfg = EvalProtocolConfig(split_overlap=0.2, flip_augment=True, use_split_fuse=True)
        out = split_flip_fuse_predict(_ConstantPredictor(7.0).predict, _image(48, 96), cfg)
        assert out.shape == (48, 96)
        np.testing.assert_allclose(out, 7.0, atol=1e-6)

    @pytest.mark.parametrize("w", [64, 96, 130, 37])
    def test_output_width_exact(self, w):
        cfg = EvalProtocolConfig(split_overlap=0.2, flip_augment=False, use_split_fuse=True)
        out = split_flip_fuse_predict(_ConstantPredictor(3.0).predict, _image(32, w), cfg)
        assert out.shape == (32, w)

    def test_segment_widths(self):
        cfg = EvalProtocolConfig(split_overlap=0.2, flip_augment=False, use_split_fuse=True)
        rec = _ShapeRecordingPredictor()
        split_flip_fuse_predict(rec.predict, _image(32, 100), cfg)
        # ceil(100 * 1.2 / 2) = 60 wide segments, two of them
        assert rec.seen == [(32, 60), (32, 60)]

    def test_flip_doubles_predictor_calls(self):
        cfg = EvalProtocolConfig(split_overlap=0.2, flip_augment=True, use_split_fuse=True)
        rec = _ShapeRecordingPredictor()
        split_flip_fuse_predict(rec.predict, _image(32, 100), cfg)
        assert len(rec.seen) == 4

    def test_zero_overlap_concatenates(self):
        cfg = EvalProtocolConfig(split_overlap=0.0, flip_augment=False, use_split_fuse=True)
        img = _image(16, 40, seed=3)
        out = split_flip_fuse_predict(_RChannelPredictor().predict, img, cfg)
        expected = (10.0 * img.data[0]).astype(np.float32)
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_overlap_blends_between_halves(self):
        # left and right halves differ; blended values must stay between them
        cfg = EvalProtocolConfig(split_overlap=0.5, flip_augment=False, use_split_fuse=True)
        data = np.zeros((3, 16, 40), dtype=np.float32)
        data[0, :, :20] = 0.2
        data[0, :, 20:] = 0.8
        out = split_flip_fuse_predict(_RChannelPredictor().predict, RgbImage(data), cfg)
        assert out.shape == (16, 40)
        assert out.min() >= 2.0 - 1e-6 and out.max() <= 8.0 + 1e-6

    def test_padding_passed_to_predictor(self):
        cfg = EvalProtocolConfig(split_overlap=0.2, flip_augment=False, use_split_fuse=True)
        rec = _ShapeRecordingPredictor()
        rec.pad_multiple = 16
        split_flip_fuse_predict(rec.predict, _image(30, 100), cfg, pad_multiple=16)
        assert all(h % 16 == 0 and w % 16 == 0 for h, w in rec.seen)

    def test_overlap_out_of_range_rejected(self):
        for overlap in (-0.1, 1.5):
            cfg = EvalProtocolConfig(split_overlap=overlap, use_split_fuse=True)
            with pytest.raises(ValueError):
                split_flip_fuse_predict(_ConstantPredictor(1.0).predict, _image(16, 40), cfg)

    def test_overlap_too_large_for_width(self):
        cfg = EvalProtocolConfig(split_overlap=1.0, flip_augment=False, use_split_fuse=True)
        with pytest.raises(ValueError):
            split_flip_fuse_predict(_ConstantPredictor(1.0).predict, _image(16, 4), cfg)


class TestPredictDepth:
    def test_direct_path(self):
        out = predict_depth(_ConstantPredictor(2.0), _image(16, 24), PROTO_DIRECT)
        assert out.shape == (16, 24)
        np.testing.assert_allclose(out, 2.0)

    def test_flip_average_is_symmetric(self):
        cfg = EvalProtocolConfig(use_garg_crop=False, flip_augment=True, use_split_fuse=False)
        img = _image(16, 24, seed=5)
        out = predict_depth(_RChannelPredictor(), img, cfg)
        expected = 0.5 * (10.0 * img.data[0] + (10.0 * img.data[0, :, ::-1])[:, ::-1])
        np.testing.assert_allclose(out, expected.astype(np.float32), atol=1e-5)

    def test_fuse_path_dispatch(self):
        cfg = EvalProtocolConfig(use_garg_crop=False, split_overlap=0.2,
                                 flip_augment=False, use_split_fuse=True)
        rec = _ShapeRecordingPredictor()
        predict_depth(rec, _image(16, 40), cfg)
        assert len(rec.seen) == 2  # split into two segments


def _sample(depth_value, h=64, w=64, marker=0.0, frame_id="s"):
    img = np.full((3, h, w), 0.5, dtype=np.float32)
    img[0, 0, 0] = marker
    depth = np.full((h, w), depth_value, dtype=np.float32)
    return RgbdSample(RgbImage(img), DepthMap(depth, depth != 0), frame_id)


class _MarkerPredictor:
    """Maps the corner marker pixel to a fixed constant depth."""

    pad_multiple = 1

    def __init__(self, table):
        self.table = table

    def predict(self, image):
        value = self.table[round(float(image.data[0, 0, 0]) * 10)]
        return np.full(image.data.shape[1:], value, dtype=np.float32)


class TestEvaluateSplit:
    def test_averages_per_sample_metrics(self):
        # sample A: abs_rel 0.2, sample B: abs_rel 0.4 -> mean 0.3
        samples = [
            _sample(1.0, marker=0.1, frame_id="a"),
            _sample(1.0, marker=0.2, frame_id="b"),
        ]
        predictor = _MarkerPredictor({1: 1.2, 2: 1.4})
        r = evaluate_split(predictor, samples, PROTO_DIRECT)
        assert abs(r.abs_rel - 0.3) < 1e-6
        assert r.n_samples == 2
        assert r.n_valid == 2 * 64 * 64

    def test_perfect_predictor(self):
        samples = [_sample(4.0, marker=0.3)]
        r = evaluate_split(_MarkerPredictor({3: 4.0}), samples, PROTO_DIRECT)
        assert r.delta1 == 1.0 and r.rmse == 0.0

    def test_sample_order_invariant(self):
        samples = [
            _sample(1.0, marker=0.1, frame_id="a"),
            _sample(2.0, marker=0.2, frame_id="b"),
            _sample(4.0, marker=0.3, frame_id="c"),
        ]
        predictor = _MarkerPredictor({1: 1.3, 2: 2.2, 3: 3.1})
        r1 = evaluate_split(predictor, samples, PROTO_DIRECT)
        r2 = evaluate_split(predictor, list(reversed(samples)), PROTO_DIRECT)
        for k in ("delta1", "delta2", "delta3", "rmse", "abs_rel", "sq_rel"):
            assert abs(getattr(r1, k) - getattr(r2, k)) < 1e-12
        assert r1.n_valid == r2.n_valid

    def test_garg_crop_shrinks_pixel_count(self):
        samples = [_sample(2.0, marker=0.1)]
        predictor = _MarkerPredictor({1: 2.0})
        full = evaluate_split(predictor, samples, PROTO_DIRECT)
        cropped = evaluate_split(
            predictor, samples,
            EvalProtocolConfig(use_garg_crop=True, flip_augment=False, use_split_fuse=False))
        assert cropped.n_valid < full.n_valid

    def test_depth_cap_excludes_far_gt(self):
        s = _sample(2.0, marker=0.1)
        s.depth.data[:32] = 100.0  # beyond the 80 m cap
        s.depth.valid_mask[:] = s.depth.data != 0
        r = evaluate_split(_MarkerPredictor({1: 2.0}), [s], PROTO_DIRECT)
        assert r.n_valid == 32 * 64

    def test_empty_mask_sample_skipped_with_warning(self, caplog):
        good = _sample(2.0, marker=0.1, frame_id="good")
        bad = _sample(200.0, marker=0.1, frame_id="bad")  # all gt beyond cap
        with caplog.at_level(logging.WARNING, logger="latentdepth.metrics_eval"):
            r = evaluate_split(_MarkerPredictor({1: 2.0}), [good, bad], PROTO_DIRECT)
        assert r.n_samples == 1
        assert any("bad" in rec.getMessage() for rec in caplog.records)

    def test_all_samples_empty_raises(self):
        bad = _sample(200.0, marker=0.1)
        with pytest.raises(ValueError):
            evaluate_split(_MarkerPredictor({1: 2.0}), [bad], PROTO_DIRECT)


class TestReportIo:
    def _report(self):
        return MetricsReport(delta1=0.9, delta2=0.95, delta3=0.99, rmse=1.5,
                             abs_rel=0.1, sq_rel=0.2, n_valid=1000, n_samples=4)

    def test_dict_round_trip(self):
        r = self._report()
        assert report_from_dict(report_to_dict(r)) == r

    def test_file_round_trip(self, tmp_path):
        r = self._report()
        json_path, txt_path = save_report(r, tmp_path / "report")
        assert json_path.name == "report.json" and txt_path.name == "report.txt"
        assert load_report(json_path) == r
        lines = txt_path.read_text().strip().splitlines()
        assert lines[0] == "delta1 0.9"
        assert len(lines) == 8

    def test_table_contains_all_metrics(self):
        table = format_report_table(self._report())
        for name in ("delta1", "delta2", "delta3", "rmse", "abs_rel", "sq_rel"):
            assert name in table
        assert "0.9000" in table
