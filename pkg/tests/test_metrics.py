from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import average_precision, confusion_by_scan, fpr_at_tpr as fpr_oracle
from protomatch.errors import EmptyGroundTruthError, ShapeMismatchError
from protomatch.metrics import (
    ConfusionCounts,
    ThresholdCurve,
    aupr,
    binary_iou,
    confusion_counts,
    default_threshold_grid,
    f1,
    fpr_at_tpr,
    pr_curve,
)

WORKED_GT = np.array([1, 1, 0, 0], dtype=bool)
WORKED_SCORES = np.array([0.9, 0.4, 0.8, 0.1])


class TestConfusionCounts:
    def test_perfect_prediction(self):
        gt = np.array([[True, False], [False, True]])
        counts = confusion_counts(gt, gt)
        assert (counts.fp, counts.fn) == (0, 0)
        assert (counts.tp, counts.tn) == (2, 2)

    def test_all_positive_prediction(self):
        gt = np.array([[True, True], [False, False]])
        counts = confusion_counts(np.ones((2, 2), bool), gt)
        assert (counts.tp, counts.fp, counts.fn, counts.tn) == (2, 2, 0, 0)

    def test_matches_pixel_scan(self):
        rng = np.random.default_rng(0)
        pred = rng.random((8, 8)) < 0.5
        gt = rng.random((8, 8)) < 0.5
        counts = confusion_counts(pred, gt)
        assert (counts.tp, counts.fp, counts.fn, counts.tn) == confusion_by_scan(pred, gt)

    def test_ignore_pixels_excluded(self):
        rng = np.random.default_rng(1)
        pred = rng.random((8, 8)) < 0.5
        gt = rng.random((8, 8)) < 0.5
        ignore = rng.random((8, 8)) < 0.3
        counts = confusion_counts(pred, gt, ignore)
        assert (counts.tp, counts.fp, counts.fn, counts.tn) == confusion_by_scan(pred, gt, ignore)
        assert counts.total == int((~ignore).sum())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            confusion_counts(np.ones((2, 2), bool), np.ones((2, 3), bool))


class TestPrCurve:
    def test_three_point_grid(self):
        curve = pr_curve(np.array([1.0, 0.0]), np.array([True, False]), thresholds=np.array([0.0, 0.5, 1.0]))
        # thresholds stored descending; prediction rule is strictly greater
        assert curve.thresholds.tolist() == [1.0, 0.5, 0.0]
        assert curve.tp.tolist() == [0, 1, 1]
        assert curve.fp.tolist() == [0, 0, 0]
        precision = curve.precision
        assert np.isnan(precision[0]) and precision[1] == 1.0 and precision[2] == 1.0
        assert curve.recall.tolist() == [0.0, 1.0, 1.0]

    def test_counts_monotone_in_threshold(self):
        rng = np.random.default_rng(2)
        curve = pr_curve(rng.random(200), rng.random(200) < 0.4)
        # thresholds descend, so tp/fp may only grow along the stored order
        assert (np.diff(curve.tp) >= 0).all()
        assert (np.diff(curve.fp) >= 0).all()

    def test_positives_constant(self):
        rng = np.random.default_rng(3)
        gt = rng.random(100) < 0.3
        curve = pr_curve(rng.random(100), gt)
        assert ((curve.tp + curve.fn) == int(gt.sum())).all()

    def test_pooling_is_order_independent(self):
        rng = np.random.default_rng(4)
        scores = [rng.random(50) for _ in range(4)]
        gts = [rng.random(50) < 0.4 for _ in range(4)]
        gts[0][:] = False  # empty-GT image still contributes FP/TN
        grid = default_threshold_grid(scores)
        forward = pr_curve(scores, gts, thresholds=grid)
        backward = pr_curve(scores[::-1], gts[::-1], thresholds=grid)
        assert np.array_equal(forward.tp, backward.tp)
        assert np.array_equal(forward.fp, backward.fp)
        assert np.array_equal(forward.tn, backward.tn)

    def test_empty_ground_truth(self):
        with pytest.raises(EmptyGroundTruthError):
            pr_curve(np.array([0.5, 0.2]), np.array([False, False]))

    def test_grid_covers_unit_interval_and_uniques(self):
        grid = default_threshold_grid(np.array([0.123, 0.77]))
        assert grid[0] == 1.0 and grid[-1] == 0.0
        assert 0.123 in grid and 0.77 in grid


class TestAveragePrecision:
    def test_worked_example(self):
        value = aupr(pr_curve(WORKED_SCORES, WORKED_GT))
        assert value == pytest.approx(5 / 6, abs=1e-9)
        assert value == pytest.approx(average_precision(WORKED_SCORES, WORKED_GT), abs=1e-12)

    def test_perfect_ranking(self):
        assert aupr(pr_curve(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0], bool))) == 1.0

    def test_inverted_ranking(self):
        scores = 1.0 - WORKED_SCORES
        value = aupr(pr_curve(scores, WORKED_GT))
        assert value == pytest.approx(average_precision(scores, WORKED_GT), abs=1e-12)
        assert value == pytest.approx(0.5, abs=1e-9)  # frozen from the enumeration oracle

    def test_constant_scores_give_prevalence(self):
        gt = np.array([1, 0, 0, 1, 0], bool)
        value = aupr(pr_curve(np.full(5, 0.5), gt))
        assert value == pytest.approx(gt.mean(), abs=1e-12)

    def test_all_zero_scores_retrieve_nothing(self):
        # strictly-greater rule: score 0 is never predicted at any t in [0, 1]
        assert aupr(pr_curve(np.zeros(4), np.array([1, 0, 1, 0], bool))) == 0.0


class TestFprAtTpr:
    def test_worked_example(self):
        result = fpr_at_tpr(pr_curve(WORKED_SCORES, WORKED_GT), target=0.95)
        assert result.fpr == pytest.approx(0.5, abs=1e-9)
        assert not result.used_fallback

    def test_perfect_separation(self):
        result = fpr_at_tpr(pr_curve(np.array([0.9, 0.8, 0.2]), np.array([1, 1, 0], bool)))
        assert result.fpr == 0.0 and not result.used_fallback

    def test_fallback_at_best_achievable_tpr(self):
        # the score-0 positive is unreachable, so recall tops out at 0.5
        scores = np.array([0.5, 0.0, 0.6])
        gt = np.array([1, 1, 0], bool)
        result = fpr_at_tpr(pr_curve(scores, gt), target=0.95)
        oracle_fpr, oracle_fallback = fpr_oracle(scores, gt, 0.95)
        assert result.used_fallback and oracle_fallback
        assert result.achieved_tpr == pytest.approx(0.5)
        assert result.fpr == pytest.approx(oracle_fpr, abs=1e-12) == pytest.approx(1.0)


class TestOverlapMetrics:
    def test_partial_overlap(self):
        pred = np.array([True, True, False])   # {a, b}
        gt = np.array([False, True, True])     # {b, c}
        assert binary_iou(pred, gt) == pytest.approx(1 / 3)
        assert f1(pred, gt) == pytest.approx(0.5)

    def test_identical_masks(self):
        mask = np.array([[True, False], [True, True]])
        assert binary_iou(mask, mask) == 1.0
        assert f1(mask, mask) == 1.0

    def test_empty_edge_cases(self):
        empty = np.zeros(4, bool)
        full = np.ones(4, bool)
        assert binary_iou(empty, empty) == 1.0 and f1(empty, empty) == 1.0
        assert binary_iou(full, empty) == 0.0 and f1(full, empty) == 0.0
        assert binary_iou(empty, full) == 0.0 and f1(empty, full) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_dice_iou_identity(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.random((6, 6)) < 0.5
        gt = rng.random((6, 6)) < 0.5
        iou = binary_iou(pred, gt)
        assert f1(pred, gt) == pytest.approx(2 * iou / (1 + iou), abs=1e-9)


class TestOracleEquivalence:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_ap_and_fpr_match_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 400))
        scores = rng.random(n).round(2)  # duplicates exercise tie handling
        gt = rng.random(n) < 0.35
        if not gt.any():
            gt[0] = True
        curve = pr_curve(scores, gt)
        assert aupr(curve) == pytest.approx(average_precision(scores, gt), abs=1e-9)
        got = fpr_at_tpr(curve, target=0.95)
        want_fpr, want_fallback = fpr_oracle(scores, gt, 0.95)
        assert got.fpr == pytest.approx(want_fpr, abs=1e-9)
        assert got.used_fallback == want_fallback
