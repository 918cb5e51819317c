import math

import numpy as np
import pytest

from segbet.errors import DegenerateInputError, ShapeMismatchError
from segbet.metrics import (
    IGNORE_INDEX,
    MetricReport,
    bf_score,
    confusion_and_iou,
    confusion_matrix,
    evaluate_segmentation,
    extract_contours,
    hard_predictions,
    image_hausdorff,
    mean_max_confidence,
    modified_hausdorff,
    read_label_png,
    write_label_png,
)

from oracles import naive_bf, naive_contours, naive_modified_hausdorff


def random_map(seed, shape=(16, 16), num_classes=4):
    return np.random.default_rng(seed).integers(0, num_classes, size=shape).astype(np.int64)


# ---------------------------------------------------------------------------


class TestIoU:
    def test_identical_maps(self):
        label = random_map(0)
        iou, mean = confusion_and_iou(label, label, 4)
        present = ~np.isnan(iou)
        assert np.all(iou[present] == 1.0)
        assert mean == 1.0

    def test_disjoint_regions(self):
        pred = np.zeros((4, 4), dtype=np.int64)
        pred[:2] = 1
        label = np.zeros((4, 4), dtype=np.int64)
        label[2:] = 1
        iou, _ = confusion_and_iou(pred, label, 2)
        assert iou[1] == 0.0

    def test_hand_confusion_one_third(self):
        # pred region of 2 pixels overlaps a 2-pixel GT region in exactly 1
        pred = np.zeros((3, 3), dtype=np.int64)
        pred[0, 0] = pred[0, 1] = 1
        label = np.zeros((3, 3), dtype=np.int64)
        label[0, 1] = label[0, 2] = 1
        iou, _ = confusion_and_iou(pred, label, 2)
        assert iou[1] == pytest.approx(1.0 / 3.0)

    def test_absent_class_excluded_from_mean(self):
        pred = np.zeros((4, 4), dtype=np.int64)
        label = np.zeros((4, 4), dtype=np.int64)
        iou, mean = confusion_and_iou(pred, label, 3)
        assert np.isnan(iou[1]) and np.isnan(iou[2])
        assert mean == 1.0

    def test_all_ignored_raises(self):
        label = np.full((4, 4), IGNORE_INDEX, dtype=np.int64)
        with pytest.raises(DegenerateInputError):
            confusion_and_iou(np.zeros((4, 4), dtype=np.int64), label, 2)

    def test_confusion_rows_are_ground_truth(self):
        pred = np.array([[0, 1]], dtype=np.int64)
        label = np.array([[1, 1]], dtype=np.int64)
        conf = confusion_matrix(pred, label, 2)
        assert conf[1, 0] == 1 and conf[1, 1] == 1 and conf.sum() == 2

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            confusion_matrix(np.zeros((2, 2), dtype=np.int64), np.zeros((3, 3), dtype=np.int64), 2)

    def test_argmax_tie_break_lowest_index(self):
        pred = np.full((2, 3, 3), 0.5)
        assert np.all(hard_predictions(pred) == 0)


class TestContours:
    def test_constant_map_has_no_contour(self):
        contours = extract_contours(np.zeros((5, 5), dtype=np.int64), 2)
        assert contours[0].shape[0] == 0

    def test_center_pixel(self):
        label = np.zeros((3, 3), dtype=np.int64)
        label[1, 1] = 1
        contours = extract_contours(label, 2)
        assert {tuple(p) for p in contours[1]} == {(1, 1)}
        assert {tuple(p) for p in contours[0]} == {(0, 1), (1, 0), (1, 2), (2, 1)}

    def test_checkerboard(self):
        label = np.array([[0, 1], [1, 0]], dtype=np.int64)
        contours = extract_contours(label, 2)
        assert {tuple(p) for p in contours[0]} == {(0, 0), (1, 1)}
        assert {tuple(p) for p in contours[1]} == {(0, 1), (1, 0)}

    def test_matches_naive_enumeration(self):
        for seed in range(10):
            label = random_map(seed, (9, 9), 3)
            got = extract_contours(label, 3)
            want = naive_contours(label, 3)
            for k in range(3):
                assert {tuple(p) for p in got[k]} == set(want[k])


class TestModifiedHausdorff:
    def test_identity_zero(self):
        pts = np.array([[0, 0], [2, 3], [5, 1]])
        assert modified_hausdorff(pts, pts) == 0.0

    def test_single_pair(self):
        assert modified_hausdorff(np.array([[0, 0]]), np.array([[0, 3]])) == pytest.approx(3.0)

    def test_hand_two_point_example(self):
        x = np.array([[0, 0]])
        y = np.array([[0, 0], [0, 3]])
        assert modified_hausdorff(x, y) == pytest.approx(0.75, abs=1e-12)

    def test_empty_raises(self):
        with pytest.raises(DegenerateInputError):
            modified_hausdorff(np.empty((0, 2)), np.array([[0, 0]]))

    def test_symmetry_and_translation(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            xs = rng.integers(0, 20, size=(rng.integers(1, 12), 2))
            ys = rng.integers(0, 20, size=(rng.integers(1, 12), 2))
            d1 = modified_hausdorff(xs, ys)
            d2 = modified_hausdorff(ys, xs)
            assert d1 == pytest.approx(d2, abs=1e-12)
            shift = rng.integers(-5, 5, size=2)
            assert modified_hausdorff(xs + shift, ys + shift) == pytest.approx(d1, abs=1e-9)

    def test_matches_naive_all_pairs(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            xs = rng.integers(0, 16, size=(rng.integers(1, 20), 2))
            ys = rng.integers(0, 16, size=(rng.integers(1, 20), 2))
            got = modified_hausdorff(xs, ys)
            want = naive_modified_hausdorff([tuple(p) for p in xs], [tuple(p) for p in ys])
            assert got == pytest.approx(want, abs=1e-9)


class TestImageHausdorff:
    def test_identical_maps_zero(self):
        label = random_map(5)
        _, mean = image_hausdorff(label, label, 4)
        assert mean == 0.0

    def test_composition_hand_value(self):
        pred = np.zeros((3, 4), dtype=np.int64)
        pred[1, 1] = 1
        label = np.zeros((3, 4), dtype=np.int64)
        label[1, 1] = 1
        label[1, 2] = 2
        # class 1 contours match exactly; class 2 only in label -> skipped
        per_class, mean = image_hausdorff(pred, label, 3)
        assert per_class[1] == 0.0
        assert np.isnan(per_class[2])

    def test_mean_over_shared_classes(self):
        pred = np.zeros((8, 8), dtype=np.int64)
        label = np.zeros((8, 8), dtype=np.int64)
        pred[0, 0] = label[0, 1] = 1  # distance 1 both directions
        pred[4, 0] = label[4, 3] = 2  # distance 3
        per_class, mean = image_hausdorff(pred, label, 3)
        assert per_class[1] == pytest.approx(1.0)
        assert per_class[2] == pytest.approx(3.0)
        # background contours also count; compute expected mean over scored classes
        assert mean == pytest.approx(np.nanmean(per_class))

    def test_no_shared_class_raises(self):
        pred = np.zeros((4, 4), dtype=np.int64)
        label = np.ones((4, 4), dtype=np.int64)
        with pytest.raises(DegenerateInputError):
            image_hausdorff(pred, label, 2)


class TestBFScore:
    def test_identical_maps_score_one(self):
        label = random_map(6)
        per_class, mean = bf_score(label, label, 4)
        present = ~np.isnan(per_class)
        assert np.all(per_class[present] == 1.0)
        assert mean == 1.0

    def test_far_contours_score_zero(self):
        pred = np.zeros((32, 32), dtype=np.int64)
        pred[0:2, 0:2] = 1
        label = np.zeros((32, 32), dtype=np.int64)
        label[30:32, 30:32] = 1
        per_class, _ = bf_score(pred, label, 2, tau=1.0)
        assert per_class[1] == 0.0

    def test_one_pixel_shift_within_tau(self):
        pred = np.zeros((16, 16), dtype=np.int64)
        pred[4:8, 4:8] = 1
        label = np.zeros((16, 16), dtype=np.int64)
        label[5:9, 4:8] = 1
        per_class, _ = bf_score(pred, label, 2, tau=1.0)
        assert per_class[1] == 1.0

    def test_swap_invariance(self):
        for seed in range(8):
            a, b = random_map(seed), random_map(seed + 100)
            pa, _ = bf_score(a, b, 4)
            pb, _ = bf_score(b, a, 4)
            assert np.allclose(pa, pb, equal_nan=True)

    def test_default_tau_is_diagonal_fraction(self):
        # at 16x16 the diagonal is ~22.6 so default tau ~0.17: only exact
        # matches count; compare against naive oracle at that tau
        pred, label = random_map(7), random_map(8)
        tau = 0.0075 * math.hypot(16, 16)
        per_class, _ = bf_score(pred, label, 4)
        want = naive_bf(pred, label, 4, tau)
        for k, v in want.items():
            assert per_class[k] == pytest.approx(v, abs=1e-9)

    def test_matches_naive_oracle(self):
        for seed in range(15):
            pred, label = random_map(seed), random_map(seed + 200)
            tau = 2.0
            per_class, _ = bf_score(pred, label, 4, tau=tau)
            want = naive_bf(pred, label, 4, tau)
            scored = {k for k in range(4) if not np.isnan(per_class[k])}
            assert scored == set(want)
            for k, v in want.items():
                assert per_class[k] == pytest.approx(v, abs=1e-9)

    def test_iou_one_implies_bf_one_and_hausdorff_zero(self):
        for seed in range(5):
            label = random_map(seed, (12, 12), 3)
            iou, _ = confusion_and_iou(label, label, 3)
            bf, _ = bf_score(label, label, 3)
            hd, _ = image_hausdorff(label, label, 3)
            for k in range(3):
                if not np.isnan(iou[k]) and iou[k] == 1.0:
                    assert bf[k] == 1.0
                    assert np.isnan(hd[k]) or hd[k] == 0.0


class TestMeanMaxConfidence:
    def test_one_hot(self):
        pred = np.zeros((2, 3, 4, 4))
        pred[:, 0] = 1.0
        mean, std = mean_max_confidence(pred)
        assert mean == 1.0 and std == 0.0

    def test_uniform(self):
        pred = np.full((1, 4, 4, 4), 0.25)
        mean, std = mean_max_confidence(pred)
        assert mean == 0.25 and std == 0.0

    def test_empty_raises(self):
        with pytest.raises(DegenerateInputError):
            mean_max_confidence(np.empty((0, 3, 4, 4)))

    def test_hand_mixture(self):
        pred = np.stack([
            np.full((2, 2), 0.7),
            np.full((2, 2), 0.3),
        ])[None]
        mean, std = mean_max_confidence(pred)
        assert mean == pytest.approx(0.7)
        assert std == pytest.approx(0.0)


class TestReportAndIO:
    def test_report_round_trip(self, tmp_path):
        label = random_map(9)
        pred = random_map(10)
        report = evaluate_segmentation([pred], [label], 4, preds_soft=[np.full((4, 16, 16), 0.25)])
        base = tmp_path / "report"
        report.write(base)
        loaded = MetricReport.from_json((tmp_path / "report.json").read_text())
        assert loaded.mean_iou == pytest.approx(report.mean_iou)
        assert loaded.class_bf == pytest.approx(report.class_bf, nan_ok=True)
        csv_text = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert len(csv_text) == 1 + 4 + 1  # header + classes + mean row
        assert csv_text[-1].startswith("mean,")

    def test_png_round_trip(self, tmp_path):
        label = random_map(11)
        path = tmp_path / "label.png"
        write_label_png(label, path)
        assert np.array_equal(read_label_png(path), label)

    def test_png_rejects_bad_values(self, tmp_path):
        with pytest.raises(DegenerateInputError):
            write_label_png(np.full((2, 2), -1), tmp_path / "bad.png")

    def test_evaluate_pools_confusion(self):
        a = np.zeros((4, 4), dtype=np.int64)
        b = np.ones((4, 4), dtype=np.int64)
        report = evaluate_segmentation([a, b], [a, b], 2)
        assert report.mean_iou == 1.0
        assert report.class_iou[0] == 1.0 and report.class_iou[1] == 1.0
