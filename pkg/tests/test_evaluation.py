"""
Tests for ROC / PR evaluation, class activation maps and regime comparison
"""
import json

import numpy as np
import pandas as pd
import pytest

from classifier import build_classifier, forward
from conftest import make_samples
from evaluation import (
    ScoredSet,
    cam_peak,
    class_activation_raw,
    compare_regimes,
    compute_cam,
    curve_report,
    normalize_map,
    operating_point,
    pr_auc,
    roc_auc,
    write_curves,
    write_metrics,
)
from utils.errors import InputError, ShapeMismatchError


def _pairwise_auc(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties count half"""
    pos = scores[labels == 1][:, None]
    neg = scores[labels == 0][None, :]
    wins = np.sum(pos > neg) + 0.5 * np.sum(pos == neg)
    return wins / (pos.size * neg.size)


def _threshold_average_precision(scores, labels):
    """Sum over distinct thresholds of (recall gain) x (precision at that threshold)"""
    total, previous_recall = 0.0, 0.0
    positives = labels.sum()
    for threshold in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= threshold
        tp = np.sum(predicted & (labels == 1))
        recall = tp / positives
        precision = tp / predicted.sum()
        total += (recall - previous_recall) * precision
        previous_recall = recall
    return total


class TestRocAuc:
    """Test ROC curves and their area"""

    def test_perfect_separation(self):
        points, value = roc_auc(ScoredSet([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]))
        assert value == 1.0
        assert tuple(points[0]) == (0.0, 0.0)
        assert tuple(points[-1]) == (1.0, 1.0)

    def test_one_misordered_pair(self):
        _, value = roc_auc(ScoredSet([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]))
        assert value == pytest.approx(0.75)

    def test_all_tied(self):
        _, value = roc_auc(ScoredSet([0.3] * 6, [0, 1, 0, 1, 1, 0]))
        assert value == pytest.approx(0.5)

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            # Coarse scores so that ties occur
            scores = np.round(rng.uniform(0, 1, size=n), 1)
            _, value = roc_auc(ScoredSet(scores, labels))
            assert value == pytest.approx(_pairwise_auc(scores, labels), abs=1e-9)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.uniform(0, 1, size=40)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        _, a = roc_auc(ScoredSet(scores, labels))
        _, b = roc_auc(ScoredSet(np.exp(3 * scores) - 7, labels))
        assert a == pytest.approx(b, abs=1e-12)

    def test_reversed_scores_complement(self):
        rng = np.random.default_rng(2)
        scores = rng.uniform(0, 1, size=30)
        labels = rng.integers(0, 2, size=30)
        labels[:2] = [0, 1]
        _, a = roc_auc(ScoredSet(scores, labels))
        _, b = roc_auc(ScoredSet(-scores, labels))
        assert a + b == pytest.approx(1.0, abs=1e-12)

    def test_points_are_monotone(self):
        rng = np.random.default_rng(3)
        points, _ = roc_auc(ScoredSet(rng.uniform(size=25), np.arange(25) % 2))
        assert np.all(np.diff(points[:, 0]) >= 0)
        assert np.all(np.diff(points[:, 1]) >= 0)

    def test_single_class(self):
        with pytest.raises(InputError):
            roc_auc(ScoredSet([0.2, 0.4], [1, 1]))


class TestPrAuc:
    """Test precision-recall curves and average precision"""

    def test_perfect_separation(self):
        _, value = pr_auc(ScoredSet([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]))
        assert value == pytest.approx(1.0)

    def test_all_tied_equals_prevalence(self):
        labels = [1, 0, 0, 0, 1, 0, 0, 0, 0, 0]
        _, value = pr_auc(ScoredSet([0.5] * 10, labels))
        assert value == pytest.approx(0.2)

    def test_matches_threshold_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, size=n)
            labels[0] = 1
            scores = np.round(rng.uniform(0, 1, size=n), 2)
            _, value = pr_auc(ScoredSet(scores, labels))
            assert value == pytest.approx(_threshold_average_precision(scores, labels), abs=1e-9)

    def test_points(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 2, size=40)
        labels[0] = 1
        points, _ = pr_auc(ScoredSet(rng.uniform(size=40), labels))
        assert tuple(points[0]) == (0.0, 1.0)
        assert points[-1, 0] == 1.0
        assert np.all(np.diff(points[:, 0]) >= 0)
        assert np.all((points[:, 1] > 0) & (points[:, 1] <= 1))

    def test_no_positives(self):
        with pytest.raises(InputError):
            pr_auc(ScoredSet([0.1, 0.2], [0, 0]))


class TestScoredSet:
    """Test score/label validation and operating points"""

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            ScoredSet([0.1, 0.2], [1])

    def test_bad_labels(self):
        with pytest.raises(InputError):
            ScoredSet([0.1, 0.2], [1, 2])

    def test_id_count(self):
        with pytest.raises(InputError):
            ScoredSet([0.1, 0.2], [0, 1], ids=["a"])

    def test_operating_point(self):
        point = operating_point(ScoredSet([0.9, 0.6, 0.4, 0.7, 0.1], [1, 1, 1, 0, 0]), threshold=0.5)
        assert point["recall"] == pytest.approx(2 / 3)
        assert point["precision"] == pytest.approx(2 / 3)
        assert point["specificity"] == pytest.approx(0.5)

    def test_no_predicted_positives(self):
        point = operating_point(ScoredSet([0.1, 0.2], [0, 1]), threshold=0.5)
        assert point["precision"] == 0.0
        assert point["recall"] == 0.0

    def test_curve_report(self):
        report = curve_report(ScoredSet([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], "baseline", ["a", "b", "c", "d"]))
        assert report.regime == "baseline"
        assert report.sample_ids == ["a", "b", "c", "d"]
        assert report.roc_auc == 1.0
        assert report.recall == 1.0 and report.specificity == 1.0

    def test_sample_order_and_replication_invariance(self):
        """Reordering the samples, or keeping every sample k times in both classes, leaves the curves alone"""
        rng = np.random.default_rng(6)
        labels = rng.integers(0, 2, size=60)
        labels[:2] = [0, 1]
        scores = np.round(rng.uniform(size=60), 2)
        reference = curve_report(ScoredSet(scores, labels))
        order = rng.permutation(60)
        for variant in (ScoredSet(scores[order], labels[order]),
                        ScoredSet(np.repeat(scores, 3), np.repeat(labels, 3))):
            report = curve_report(variant)
            assert report.roc_auc == pytest.approx(reference.roc_auc, abs=1e-12)
            assert report.pr_auc == pytest.approx(reference.pr_auc, abs=1e-12)
            assert np.allclose(report.roc_points, reference.roc_points)
            assert np.allclose(report.pr_points, reference.pr_points)


class TestClassActivationMaps:
    """Test CAM formation"""

    def test_constant_features(self):
        raw = class_activation_raw(np.full((4, 4, 3), 2.0), np.array([0.5, -1.0, 2.0]), 16)
        assert np.all(normalize_map(raw) == 0.0)

    def test_indicator_patch(self):
        features = np.zeros((4, 4, 2))
        features[1:3, 1:3, 0] = 1.0
        features[:, :, 1] = np.random.default_rng(0).uniform(size=(4, 4))
        heatmap = normalize_map(class_activation_raw(features, np.array([1.0, 0.0]), 16))
        assert heatmap.max() == 1.0
        ys, xs = np.nonzero(heatmap == 1.0)
        # Upsampled patch covers pixels 4..11 in both directions
        assert ys.min() >= 4 and ys.max() <= 11
        assert xs.min() >= 4 and xs.max() <= 11
        assert heatmap[0, 0] == 0.0

    def test_linear_in_weights(self):
        rng = np.random.default_rng(1)
        features = rng.uniform(size=(3, 3, 4))
        w1, w2 = rng.normal(size=4), rng.normal(size=4)
        combined = class_activation_raw(features, w1 + 2 * w2, 12)
        separate = class_activation_raw(features, w1, 12) + 2 * class_activation_raw(features, w2, 12)
        np.testing.assert_allclose(combined, separate, atol=1e-12)

    def test_weight_count_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            class_activation_raw(np.zeros((2, 2, 3)), np.zeros(4), 8)

    def test_compute_cam(self, tiny_classifier_config):
        model = build_classifier(tiny_classifier_config, seed=0)
        sample = make_samples([1], size=16)[0]
        cam = compute_cam(model, sample)
        assert cam.heatmap.shape == (16, 16)
        assert cam.heatmap.min() >= 0.0 and cam.heatmap.max() <= 1.0
        assert cam.sample_id == sample.id
        assert cam.probability == pytest.approx(float(forward(model, sample.image[None])[0]))
        x, y = cam_peak(cam)
        assert cam.heatmap[y, x] == cam.heatmap.max()


class TestCompareRegimes:
    """Test the regime comparison table and its files"""

    @pytest.fixture
    def reports(self):
        rng = np.random.default_rng(6)
        labels = np.array([0] * 8 + [1] * 4)
        ids = [f"v{i}" for i in range(12)]
        scores = rng.uniform(size=12)
        return {
            "baseline": curve_report(ScoredSet(scores, labels, "baseline", ids)),
            "aug_same_data": curve_report(ScoredSet(scores, labels, "aug_same_data", ids)),
        }

    def test_identical_sets_identical_rows(self, tmp_path, reports):
        table = compare_regimes(reports, tmp_path)
        assert list(table["regime"]) == ["baseline", "aug_same_data"]
        rows = table.drop(columns="regime").to_numpy()
        assert np.array_equal(rows[0], rows[1])

    def test_files(self, tmp_path, reports):
        compare_regimes(reports, tmp_path)
        for name in ("comparison.csv", "comparison.json", "roc_baseline.csv", "pr_aug_same_data.csv"):
            assert (tmp_path / "metrics" / name).is_file()
        assert (tmp_path / "plots" / "roc_pr.png").is_file()
        assert (tmp_path / "plots" / "roc_pr.svg").is_file()
        roc = pd.read_csv(tmp_path / "metrics" / "roc_baseline.csv")
        assert list(roc.columns) == ["fpr", "tpr"]
        assert roc.iloc[-1].tolist() == [1.0, 1.0]

    def test_plots_are_reproducible(self, tmp_path, reports):
        compare_regimes(reports, tmp_path / "a")
        compare_regimes(reports, tmp_path / "b")
        assert (tmp_path / "a" / "plots" / "roc_pr.svg").read_bytes() == \
            (tmp_path / "b" / "plots" / "roc_pr.svg").read_bytes()

    def test_different_validation_samples(self, tmp_path, reports):
        other = curve_report(ScoredSet([0.1, 0.9], [0, 1], "aug_pretrained", ["x", "y"]))
        with pytest.raises(InputError):
            compare_regimes({**reports, "aug_pretrained": other}, tmp_path)

    def test_single_regime(self, tmp_path, reports):
        with pytest.raises(InputError):
            compare_regimes({"baseline": reports["baseline"]}, tmp_path)

    def test_write_curves(self, tmp_path, reports):
        paths = write_curves(reports["baseline"], tmp_path)
        assert [p.name for p in paths] == ["roc_baseline.csv", "pr_baseline.csv"]

    def test_nan_written_as_null(self, tmp_path):
        table = pd.DataFrame([{"regime": "baseline", "roc_auc": 0.5, "pr_auc": 0.5,
                               "recall": float("nan"), "precision": 0.0, "specificity": 1.0}])
        write_metrics(table, tmp_path)
        rows = json.loads((tmp_path / "comparison.json").read_text())
        assert rows[0]["recall"] is None
