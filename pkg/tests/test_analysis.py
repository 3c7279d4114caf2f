from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pedtrack.errors import EmptyForeground
from pedtrack.imaging import BinaryMask
from pedtrack.analysis import (
    DEFAULT_MIN_AREA,
    DEFAULT_TAU,
    AnalyzerDescriptor,
    AnalyzerRegistry,
    SkinModel,
    anomaly_score_map,
    default_registry,
    detect_blobs,
    fit_skin_model,
    run_analyzers,
)

from _oracles import mad_oracle, median_oracle
from _synth import disk_mask, make_foot_image, rgb_from

FULL = BinaryMask(np.ones((20, 20), dtype=bool))


def flat_image(rgb, w=20, h=20):
    px = np.zeros((h, w, 3), dtype=np.uint8)
    px[:, :] = rgb
    return rgb_from(px)


class TestSkinModel:
    def test_constant_skin(self):
        model = fit_skin_model(flat_image((200, 150, 120)), FULL)
        assert model.medians == (200.0, 150.0, 120.0)
        assert model.mads == (1.0, 1.0, 1.0)

    def test_outliers_do_not_move_medians(self):
        px = np.zeros((10, 10, 3), dtype=np.uint8)
        px[:, :] = (200, 150, 120)
        px[0, 0] = (20, 20, 20)  # 1% outlier
        model = fit_skin_model(rgb_from(px), BinaryMask(np.ones((10, 10), dtype=bool)))
        assert model.medians == (200.0, 150.0, 120.0)

    def test_only_foreground_counts(self):
        px = np.zeros((10, 10, 3), dtype=np.uint8)
        px[:5] = (50, 60, 70)
        px[5:] = (200, 210, 220)
        mask = np.zeros((10, 10), dtype=bool)
        mask[:5] = True
        model = fit_skin_model(rgb_from(px), BinaryMask(mask))
        assert model.medians == (50.0, 60.0, 70.0)

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyForeground):
            fit_skin_model(flat_image((1, 2, 3)), BinaryMask(np.zeros((20, 20), dtype=bool)))

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_sort_oracle(self, seed):
        rng = np.random.default_rng(seed)
        px = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
        mask = rng.random((12, 12)) < 0.7
        if not mask.any():
            mask[0, 0] = True
        model = fit_skin_model(rgb_from(px), BinaryMask(mask))
        for c in range(3):
            values = px[:, :, c][mask].astype(float).tolist()
            assert model.medians[c] == pytest.approx(median_oracle(values))
            assert model.mads[c] == pytest.approx(mad_oracle(values))


class TestScoreMap:
    def test_pixel_at_medians_scores_zero(self):
        model = SkinModel((100.0, 110.0, 120.0), (2.0, 3.0, 4.0))
        score = anomaly_score_map(flat_image((100, 110, 120)), FULL, model)
        assert (score == 0.0).all()

    @pytest.mark.parametrize("k", [1.0, 2.5, 4.0])
    def test_single_channel_deviation(self, k):
        model = SkinModel((100.0, 110.0, 120.0), (2.0, 3.0, 4.0))
        px = flat_image((100 + int(k * 2), 110, 120))  # k MADs in channel 0
        score = anomaly_score_map(px, FULL, model)
        assert score[0, 0] == pytest.approx(k / math.sqrt(3.0))

    def test_background_is_zero(self):
        model = SkinModel((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        mask = np.zeros((20, 20), dtype=bool)
        mask[5, 5] = True
        score = anomaly_score_map(flat_image((255, 255, 255)), BinaryMask(mask), model)
        assert score[5, 5] > 0
        assert (score[~mask] == 0.0).all()

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_formula_oracle(self, seed):
        rng = np.random.default_rng(seed)
        px = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        model = SkinModel((90.0, 120.0, 140.0), (3.0, 2.0, 5.0))
        score = anomaly_score_map(rgb_from(px), BinaryMask(np.ones((8, 8), dtype=bool)), model)
        for y in range(8):
            for x in range(8):
                total = sum(
                    ((float(px[y, x, c]) - model.medians[c]) / model.mads[c]) ** 2
                    for c in range(3)
                )
                assert score[y, x] == pytest.approx(math.sqrt(total / 3.0))

    @given(st.integers(0, 2**32 - 1), st.integers(-40, 40))
    @settings(max_examples=30, deadline=None)
    def test_shift_invariance(self, seed, shift):
        # Adding one constant to every channel and to the medians leaves
        # the residuals, and so the scores, unchanged.
        rng = np.random.default_rng(seed)
        px = rng.integers(60, 196, size=(6, 6, 3), dtype=np.uint8)
        model = SkinModel((100.0, 120.0, 140.0), (2.0, 3.0, 4.0))
        shifted_model = SkinModel(
            tuple(m + shift for m in model.medians), model.mads
        )
        mask = BinaryMask(np.ones((6, 6), dtype=bool))
        a = anomaly_score_map(rgb_from(px), mask, model)
        b = anomaly_score_map(
            rgb_from((px.astype(np.int64) + shift).astype(np.uint8)), mask, shifted_model
        )
        assert np.allclose(a, b)


def disk_scores(
    w, h, disks, value=10.0
) -> np.ndarray:
    score = np.zeros((h, w))
    for cx, cy, r in disks:
        score[disk_mask(w, h, cx, cy, r).bits] = value
    return score


class TestDetectBlobs:
    def test_all_below_tau(self):
        assert detect_blobs(np.full((30, 30), 3.0)) == []

    def test_single_disk(self):
        score = disk_scores(64, 48, [(30, 22, 6)])
        blobs = detect_blobs(score)
        assert len(blobs) == 1
        blob = blobs[0]
        assert blob.area_px == 113
        assert math.hypot(blob.centroid[0] - 30, blob.centroid[1] - 22) < 0.5
        assert blob.bbox == (24, 16, 13, 13)
        assert blob.mean_score == pytest.approx(10.0)

    def test_two_disks_sorted_by_area(self):
        score = disk_scores(96, 48, [(20, 24, 3), (66, 24, 6)])
        blobs = detect_blobs(score)
        assert [b.area_px for b in blobs] == [113, 29]
        assert blobs[0].centroid[0] > blobs[1].centroid[0]
        assert [b.id for b in blobs] == [1, 2]

    def test_area_tie_breaks_row_major(self):
        score = np.zeros((40, 40))
        score[20:25, 20:25] = 10.0  # later block
        score[2:7, 2:7] = 10.0  # earlier block, same 25 px area
        blobs = detect_blobs(score, min_area=25)
        assert len(blobs) == 2
        assert blobs[0].bbox[:2] == (2, 2)
        assert blobs[1].bbox[:2] == (20, 20)

    def test_min_area_filters(self):
        score = disk_scores(64, 48, [(30, 22, 2)])  # 13 px < 25
        assert detect_blobs(score) == []
        assert len(detect_blobs(score, min_area=13)) == 1

    def test_exactly_tau_is_below(self):
        score = np.full((30, 30), DEFAULT_TAU)
        assert detect_blobs(score) == []

    def test_blob_pixels_are_superthreshold_subset(self):
        rng = np.random.default_rng(9)
        score = rng.random((50, 50)) * 6.0
        blobs = detect_blobs(score, tau=3.5, min_area=4)
        above = int((score > 3.5).sum())
        assert sum(b.area_px for b in blobs) <= above
        for b in blobs:
            x, y, w, h = b.bbox
            assert x >= 0 and y >= 0 and x + w <= 50 and y + h <= 50
            assert x <= b.centroid[0] <= x + w - 1
            assert y <= b.centroid[1] <= y + h - 1

    def test_deterministic(self):
        rng = np.random.default_rng(17)
        score = rng.random((40, 40)) * 8.0
        a = detect_blobs(score, min_area=3)
        b = detect_blobs(score, min_area=3)
        assert a == b


class TestRegistry:
    def test_duplicate_name_rejected(self):
        registry = default_registry()
        with pytest.raises(ValueError):
            registry.register(AnalyzerDescriptor("scar_detect", "2", lambda i, m, s: {}))

    @pytest.mark.parametrize("name", ["Bad", "with space", "", "UPPER", "a.b"])
    def test_bad_names_rejected(self, name):
        registry = AnalyzerRegistry()
        with pytest.raises(ValueError):
            registry.register(AnalyzerDescriptor(name, "1", lambda i, m, s: {}))

    def test_insertion_order_preserved(self):
        registry = default_registry()
        registry.register(AnalyzerDescriptor("zeta", "1", lambda i, m, s: {}))
        registry.register(AnalyzerDescriptor("alpha", "1", lambda i, m, s: {}))
        assert registry.names() == ["scar_detect", "zeta", "alpha"]


class TestRunAnalyzers:
    def test_blank_skin_has_no_blobs(self):
        img, mask = make_foot_image(96, 48, seed=31)
        report = run_analyzers("scan-1", img, mask, default_registry(), clock=lambda: 5.0)
        assert report.scan_id == "scan-1"
        assert report.blobs == []
        assert report.produced_at == 5.0
        assert report.analyzers["scar_detect"]["blobs"] == []

    def test_lesion_reaches_report(self):
        img, mask = make_foot_image(
            128, 64, seed=32, lesions=[(60.0, 32.0, 5.0, (60, 40, 45))]
        )
        report = run_analyzers("scan-2", img, mask, default_registry(), clock=lambda: 0.0)
        assert len(report.blobs) == 1
        cx, cy = report.blobs[0].centroid
        assert math.hypot(cx - 60, cy - 32) < 1.5

    def test_failing_analyzer_is_isolated(self):
        def boom(img, mask, model):
            raise RuntimeError("synthetic failure")

        registry = default_registry()
        registry.register(AnalyzerDescriptor("boom", "1", boom))
        img, mask = make_foot_image(96, 48, seed=33)
        report = run_analyzers("scan-3", img, mask, registry, clock=lambda: 0.0)
        assert report.analyzers["boom"] == {"error": "RuntimeError: synthetic failure"}
        assert "blobs" in report.analyzers["scar_detect"]

    def test_registry_missing_builtin_rejected(self):
        registry = AnalyzerRegistry()
        registry.register(AnalyzerDescriptor("other", "1", lambda i, m, s: {}))
        img, mask = make_foot_image(96, 48, seed=34)
        with pytest.raises(ValueError):
            run_analyzers("scan-4", img, mask, registry)

    def test_report_dict_shape(self):
        img, mask = make_foot_image(
            96, 48, seed=35, lesions=[(48.0, 24.0, 4.0, (70, 45, 50))]
        )
        d = run_analyzers("s", img, mask, default_registry(), clock=lambda: 1.0).to_dict()
        assert set(d) == {"scan_id", "analyzers", "blobs", "produced_at"}
        for blob in d["blobs"]:
            assert set(blob) == {"id", "centroid", "bbox", "area_px", "mean_score"}


class TestDetectionQuality:
    def test_injected_lesions_found(self):
        # Smoke-scale version of the acceptance battery: 4-MAD contrast,
        # radius-5 disks (81 px), noise sigma = 1 MAD.
        rng = np.random.default_rng(77)
        hits = 0
        false_blobs = 0
        total_blobs = 0
        trials = 15
        for trial in range(trials):
            img, mask = make_foot_image(192, 96, seed=1000 + trial)
            model = fit_skin_model(img, mask)
            ys, xs = np.nonzero(mask.bits)
            while True:
                i = int(rng.integers(0, xs.size))
                cx, cy = float(xs[i]), float(ys[i])
                spot = disk_mask(192, 96, cx, cy, 5.0)
                if (spot.bits & ~mask.bits).sum() == 0:
                    break
            color = tuple(
                int(np.clip(model.medians[c] - 4.0 * model.mads[c] * math.sqrt(3.0), 0, 255))
                for c in range(3)
            )
            img, _ = make_foot_image(
                192, 96, seed=1000 + trial, lesions=[(cx, cy, 5.0, color)]
            )
            noisy = img.pixels.astype(np.float64) + rng.normal(
                0.0, float(np.mean(model.mads)), img.pixels.shape
            )
            noisy_img = rgb_from(np.clip(np.floor(noisy + 0.5), 0, 255).astype(np.uint8))
            blobs = detect_blobs(anomaly_score_map(noisy_img, mask, model))
            total_blobs += len(blobs)
            matched = [
                b for b in blobs if math.hypot(b.centroid[0] - cx, b.centroid[1] - cy) <= 6.0
            ]
            if matched:
                hits += 1
            false_blobs += len(blobs) - len(matched)
        recall = hits / trials
        precision = (total_blobs - false_blobs) / max(total_blobs, 1)
        assert recall >= 0.9
        assert precision >= 0.8
