"""Metric checks: hand-worked cases, rank-statistic equivalence, scans."""

import numpy as np
import pytest

from volnet.errors import DegenerateLabelsError, NumericError, ShapeError
from volnet.metrics import (
    auc,
    confusion,
    evaluate,
    f1_from_counts,
    f1_score,
    predictions_at_threshold,
    roc_curve,
    write_roc_csv,
    youden_threshold,
)

from _oracles import brute_force_roc, exhaustive_youden, mann_whitney_auc


class TestRocCurve:
    def test_hand_case_auc(self):
        curve = roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert auc(curve) == 0.75

    def test_sentinel_and_endpoints(self):
        curve = roc_curve([0.2, 0.7, 0.5], [0, 1, 1])
        assert curve.thresholds[0] == np.inf
        assert curve.tp[0] == 0 and curve.fp[0] == 0
        assert curve.tp[-1] == curve.n_pos
        assert curve.fp[-1] == curve.n_neg

    def test_counts_monotone_thresholds_strictly_decreasing(self):
        rng = np.random.default_rng(21)
        scores = rng.integers(0, 5, size=60) / 4.0
        labels = rng.integers(0, 2, size=60)
        labels[0], labels[1] = 0, 1
        curve = roc_curve(scores, labels)
        assert np.all(np.diff(curve.tp) >= 0)
        assert np.all(np.diff(curve.fp) >= 0)
        assert np.all(np.diff(curve.thresholds) < 0)

    def test_tied_scores_collapse_to_one_point(self):
        curve = roc_curve([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
        assert curve.thresholds.size == 2  # sentinel + one realized
        assert curve.tp[1] == 2 and curve.fp[1] == 2

    def test_perfect_separation(self):
        curve = roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert auc(curve) == 1.0

    def test_reversed_separation(self):
        curve = roc_curve([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])
        assert auc(curve) == 0.0

    def test_all_tied_is_half(self):
        curve = roc_curve([0.3, 0.3, 0.3, 0.3], [1, 1, 0, 0])
        assert auc(curve) == 0.5

    def test_matches_brute_force_confusion_scan(self):
        rng = np.random.default_rng(31)
        scores = rng.integers(0, 10, size=50) / 9.0
        labels = rng.integers(0, 2, size=50)
        labels[0], labels[1] = 0, 1
        curve = roc_curve(scores, labels)
        want = brute_force_roc(scores, labels)
        assert curve.thresholds.size == len(want) + 1
        for i, (t, fp, tp) in enumerate(want, start=1):
            assert curve.thresholds[i] == t
            assert curve.fp[i] == fp
            assert curve.tp[i] == tp


class TestAucOracle:
    def test_matches_mann_whitney_on_random_sets(self):
        rng = np.random.default_rng(22)
        for _ in range(200):
            n = int(rng.integers(2, 40))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            # quantized scores force plenty of ties
            scores = rng.integers(0, 8, size=n) / 7.0
            got = auc(roc_curve(scores, labels))
            want = mann_whitney_auc(scores, labels)
            assert abs(got - want) <= 1e-12

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(23)
        scores = rng.normal(size=50)
        labels = rng.integers(0, 2, size=50)
        labels[0], labels[1] = 0, 1
        a = auc(roc_curve(scores, labels))
        b = auc(roc_curve(3.0 * scores + 10.0, labels))
        assert a == b


class TestYouden:
    def test_hand_case_prefers_higher_tpr_on_tie(self):
        # J = 0.5 both at t=0.9 (tpr .5, fpr 0) and t=0.3 (tpr 1, fpr .5)
        res = youden_threshold(roc_curve([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]))
        assert res.threshold == 0.3
        assert res.j == 0.5
        assert res.tpr == 1.0
        assert res.fpr == 0.5

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(24)
        for _ in range(200):
            n = int(rng.integers(2, 30))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            scores = rng.integers(0, 6, size=n) / 5.0
            res = youden_threshold(roc_curve(scores, labels))
            j, tpr, fpr, t = exhaustive_youden(scores, labels)
            assert res.threshold == t
            assert res.j == j
            assert res.tpr == tpr
            assert res.fpr == fpr

    def test_perfect_classifier_threshold(self):
        res = youden_threshold(roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]))
        assert res.j == 1.0
        assert res.threshold == 0.8


class TestConfusionAndF1:
    def test_equal_score_counts_as_positive(self):
        np.testing.assert_array_equal(predictions_at_threshold([0.5, 0.4], 0.5), [1, 0])

    def test_hand_confusion_and_f1(self):
        # tp=2, fp=0, fn=1
        assert confusion([1, 0, 0, 1], [1, 1, 0, 1]) == (2, 0, 1, 1)
        assert f1_score([1, 0, 0, 1], [1, 1, 0, 1]) == 0.8

    def test_perfect_predictions(self):
        assert f1_score([1, 1, 0, 0], [1, 1, 0, 0]) == 1.0

    def test_all_negative_predictions_with_a_positive_label(self):
        assert f1_score([0, 0, 0], [0, 1, 0]) == 0.0

    def test_degenerate_counts_give_one(self):
        assert f1_from_counts(0, 0, 0) == 1.0
        assert f1_score([0, 0], [0, 0]) == 1.0

    def test_non_binary_prediction_rejected(self):
        with pytest.raises(ValueError, match="expected 0 or 1"):
            confusion([0, 2], [0, 1])


class TestEvaluate:
    def test_default_threshold_is_youden(self):
        scores = [0.9, 0.8, 0.3, 0.2]
        labels = [1, 0, 1, 0]
        report = evaluate(scores, labels)
        assert report.threshold_source == "youden"
        assert report.threshold == 0.3
        assert report.f1 == f1_score(predictions_at_threshold(scores, 0.3), labels)
        assert report.tp + report.fn == report.n_pos
        assert report.fp + report.tn == report.n_neg

    def test_given_threshold_respected(self):
        report = evaluate([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0], threshold=0.85)
        assert report.threshold_source == "given"
        assert report.tp == 1 and report.fp == 0

    def test_report_text_round_trips_key_values(self):
        report = evaluate([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        text = report.as_text()
        fields = dict(line.split("=", 1) for line in text.strip().splitlines())
        assert float(fields["auc"]) == 0.75
        assert int(fields["n"]) == 4
        assert fields["threshold_source"] == "youden"
        assert float(fields["f1"]) == report.f1

    def test_accuracy_and_rates(self):
        report = evaluate([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0], threshold=0.5)
        assert report.accuracy == 0.5
        assert report.tpr == 0.5
        assert report.fpr == 0.5


class TestValidation:
    def test_single_class_rejected(self):
        with pytest.raises(DegenerateLabelsError):
            roc_curve([0.1, 0.2], [1, 1])

    def test_nan_score_rejected_with_index(self):
        with pytest.raises(NumericError, match="index 1"):
            roc_curve([0.1, float("nan"), 0.3], [1, 0, 1])

    def test_non_binary_label_rejected(self):
        with pytest.raises(ValueError, match="expected 0 or 1"):
            roc_curve([0.1, 0.2], [1, 2])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            roc_curve([0.1, 0.2, 0.3], [1, 0])


class TestRocCsv:
    def test_round_trip(self, tmp_path):
        curve = roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        path = tmp_path / "roc.csv"
        write_roc_csv(path, curve)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "threshold,fpr,tpr"
        assert len(lines) == 1 + curve.thresholds.size
        first = lines[1].split(",")
        assert float(first[0]) == np.inf
        parsed_t = [float(row.split(",")[0]) for row in lines[1:]]
        np.testing.assert_array_equal(parsed_t, curve.thresholds)
