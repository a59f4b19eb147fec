"""
評価ハーネス・ROC・レポートのテスト
tests/test_evaluation.py
"""
from unittest.mock import MagicMock

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from core.exceptions import ArgumentError, ExperimentAbortedError
from services.attack_service import DeepFoolConfig, FgsmConfig
from services.dataset_service import Dataset
from services.detector_service import DetectorConfig, calibrate_threshold
from services.evaluation_service import (
    OUTCOME_COLUMNS,
    STATUS_ERROR,
    STATUS_FAILED,
    STATUS_MISCLASSIFIED,
    STATUS_OK,
    STATUS_SKIPPED,
    STATUS_SUCCESS,
    SampleOutcome,
    bootstrap_auc_ci,
    detection_rate_at_fpr,
    histogram_frame,
    precision_at_fpr,
    read_outcomes,
    render_text_report,
    report_from_csv,
    roc,
    run_experiment,
    sample_seed,
    summarize,
    write_outcomes,
)

ATTACKS = [FgsmConfig(epsilon=0.4), DeepFoolConfig(max_iterations=5)]


@pytest.fixture
def brightness_dataset():
    """暗い・明るい・誤分類・全ゼロ（勾配が消える）の4枚"""
    images = np.stack([np.full((1, 6, 6), value) for value in (0.2, 0.8, 0.6, 0.0)])
    return Dataset(images, np.array([0, 1, 0, 0]), num_classes=2)


@pytest.fixture
def outcomes(separable_network, brightness_dataset):
    return run_experiment(separable_network, brightness_dataset, ATTACKS, DetectorConfig(), seed=3)


def _row(attack, status, clean_score=None, adversarial_score=None, **kwargs):
    return SampleOutcome(image_id=kwargs.pop("image_id", 0), label=0, attack=attack, status=status,
                         clean_score=clean_score, adversarial_score=adversarial_score, **kwargs)


class TestRoc:
    """ROC と AUC"""

    def test_perfect_separation(self):
        curve = roc([0.1, 0.2, 0.3], [0.8, 0.9])
        assert curve.auc == pytest.approx(1.0)
        assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0)
        assert (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)

    def test_identical_distributions(self):
        assert roc([0.5, 0.5, 0.5], [0.5, 0.5]).auc == pytest.approx(0.5)

    def test_inverted_scores(self):
        assert roc([2.0, 3.0], [0.0, 1.0]).auc == pytest.approx(0.0)

    def test_matches_sklearn_with_ties(self, rng):
        clean = np.round(rng.random(60), 1)
        adversarial = np.round(rng.random(40) + 0.2, 1)
        expected = roc_auc_score(np.r_[np.zeros(60), np.ones(40)], np.r_[clean, adversarial])
        assert roc(clean, adversarial).auc == pytest.approx(expected)

    def test_thresholds_descend(self, rng):
        curve = roc(rng.random(10), rng.random(10))
        assert curve.thresholds[0] == np.inf
        assert curve.thresholds[-1] == -np.inf
        assert np.all(np.diff(curve.thresholds) < 0)
        assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)

    def test_empty_side_rejected(self):
        with pytest.raises(ArgumentError):
            roc([], [1.0])

    def test_detection_rate_and_precision(self):
        curve = roc(np.arange(1, 101, dtype=float), np.full(10, 95.5))
        assert detection_rate_at_fpr(curve, 0.05) == pytest.approx(1.0)
        assert detection_rate_at_fpr(curve, 0.01) == pytest.approx(0.0)
        assert precision_at_fpr(curve, 0.05) == pytest.approx(10 / 15)
        assert np.isnan(precision_at_fpr(curve, 0.01))

    def test_detection_rate_is_non_decreasing_in_fpr(self, rng):
        curve = roc(rng.random(80), rng.random(50) + 0.2)
        rates = [detection_rate_at_fpr(curve, fpr) for fpr in np.linspace(0.01, 0.99, 50)]
        assert all(later >= earlier for earlier, later in zip(rates, rates[1:]))

    def test_bootstrap_is_deterministic(self, rng):
        clean, adversarial = rng.random(30), rng.random(30) + 0.3
        low, high = bootstrap_auc_ci(clean, adversarial, resamples=200)
        assert (low, high) == bootstrap_auc_ci(clean, adversarial, resamples=200)
        assert 0.0 <= low <= high <= 1.0


def _pair_counting_auc(clean, adversarial) -> float:
    """全ペアを数える AUC（同点は 1/2）"""
    wins = 0.0
    for a in adversarial:
        for c in clean:
            wins += 1.0 if a > c else 0.5 if a == c else 0.0
    return wins / (len(clean) * len(adversarial))


class TestRocOracle:
    """100 組のランダムなスコア集合で ROC の性質を確かめる"""

    @pytest.mark.parametrize("seed", range(100))
    def test_random_score_sets(self, seed):
        rng = np.random.default_rng(seed)
        n_clean, n_adversarial = int(rng.integers(5, 60)), int(rng.integers(5, 60))
        clean = rng.normal(size=n_clean)
        adversarial = rng.normal(loc=rng.uniform(-1.0, 2.0), size=n_adversarial)
        if seed % 2:
            clean, adversarial = np.round(clean, 1), np.round(adversarial, 1)

        curve = roc(clean, adversarial)
        assert abs(curve.auc - _pair_counting_auc(clean, adversarial)) < 1e-9

        rates = [detection_rate_at_fpr(curve, fpr) for fpr in np.linspace(0.01, 0.99, 25)]
        assert all(later >= earlier for earlier, later in zip(rates, rates[1:]))

        target = float(rng.uniform(0.05, 0.5))
        threshold = calibrate_threshold(clean, target)
        empirical = float(np.mean(clean > threshold))
        assert empirical <= target + 1e-9
        if not seed % 2:
            # 同点がなければ目標との差は 1/N 未満
            assert target - empirical < 1.0 / n_clean


class TestRunExperiment:
    """画像ごとの実験"""

    def test_row_layout_and_statuses(self, outcomes):
        assert len(outcomes) == 12
        statuses = [(row.image_id, row.attack, row.status) for row in outcomes]
        assert statuses[0] == (0, "clean", STATUS_OK)
        assert statuses[1] == (0, "fgsm", STATUS_SUCCESS)
        assert statuses[3] == (1, "clean", STATUS_OK)
        assert statuses[4] == (1, "fgsm", STATUS_SUCCESS)
        assert statuses[6:9] == [(2, "clean", STATUS_MISCLASSIFIED), (2, "fgsm", STATUS_SKIPPED),
                                 (2, "deepfool", STATUS_SKIPPED)]
        assert statuses[9] == (3, "clean", STATUS_OK)
        assert [status for _, _, status in statuses[10:]] == [STATUS_ERROR, STATUS_ERROR]

    def test_error_rows_name_the_exception(self, outcomes):
        errors = [row for row in outcomes if row.status == STATUS_ERROR]
        assert errors[0].error.startswith("DegenerateGradientError")
        assert errors[1].error.startswith("DegenerateGeometryError")

    def test_adversarial_score_only_on_success(self, outcomes):
        for row in outcomes:
            if row.status == STATUS_SUCCESS:
                assert row.adversarial_score is not None
            else:
                assert row.adversarial_score is None

    def test_fgsm_row_records_budget(self, outcomes):
        row = outcomes[1]
        assert row.linf_norm == pytest.approx(0.4)
        assert row.gradient_calls == 1
        assert row.predicted == 1

    def test_image_ids_order_output(self, separable_network, brightness_dataset):
        rows = run_experiment(separable_network, brightness_dataset, ATTACKS, DetectorConfig(),
                              seed=3, image_ids=[10, 3, 7, 1])
        assert [row.image_id for row in rows if row.attack == "clean"] == [1, 3, 7, 10]
        assert rows[0].status == STATUS_OK and rows[1].status == STATUS_ERROR

    def test_parallel_run_matches_sequential(self, tmp_path, separable_network, brightness_dataset, outcomes):
        parallel = run_experiment(separable_network, brightness_dataset, ATTACKS, DetectorConfig(),
                                  seed=3, jobs=3)
        write_outcomes(outcomes, str(tmp_path / "a.csv"))
        write_outcomes(parallel, str(tmp_path / "b.csv"))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_callback_receives_attack_results(self, separable_network, brightness_dataset):
        callback = MagicMock()
        run_experiment(separable_network, brightness_dataset, ATTACKS, DetectorConfig(),
                       seed=3, on_result=callback)
        assert callback.call_count == 4
        image_id, result, clean, _ = callback.call_args_list[0].args
        assert image_id == 0
        assert result.attack == "fgsm"
        assert clean.gray.shape == (6, 6)

    def test_no_attacks_gives_clean_rows_only(self, separable_network, brightness_dataset):
        rows = run_experiment(separable_network, brightness_dataset, [], DetectorConfig(), seed=3)
        assert [row.attack for row in rows] == ["clean"] * 4
        assert [row.status for row in rows] == [STATUS_OK, STATUS_OK, STATUS_MISCLASSIFIED, STATUS_OK]
        assert all(row.adversarial_score is None for row in rows)

    def test_too_many_errors_abort(self, separable_network):
        zeros = Dataset(np.zeros((2, 1, 6, 6)), np.array([0, 0]), num_classes=2)
        with pytest.raises(ExperimentAbortedError):
            run_experiment(separable_network, zeros, ATTACKS, DetectorConfig(), seed=0)

    def test_empty_dataset_rejected(self, separable_network):
        empty = Dataset(np.zeros((0, 1, 6, 6)), np.zeros(0), num_classes=2)
        with pytest.raises(ArgumentError):
            run_experiment(separable_network, empty, ATTACKS, DetectorConfig(), seed=0)

    def test_sample_seed(self):
        assert sample_seed(1, 2, 0) == sample_seed(1, 2, 0)
        assert sample_seed(1, 2, 0) != sample_seed(1, 2, 1)
        assert sample_seed(1, 2, 0) != sample_seed(1, 2, 0, attack_seed=9)


class TestOutcomesCsv:
    """結果 CSV"""

    def test_header_and_empty_cells(self, tmp_path, outcomes):
        path = tmp_path / "outcomes.csv"
        write_outcomes(outcomes, str(path))
        lines = path.read_text(encoding="utf-8").split("\n")
        assert lines[0] == ",".join(OUTCOME_COLUMNS)
        skipped = lines[8].split(",")
        assert skipped[:4] == ["2", "0", "fgsm", STATUS_SKIPPED]
        assert skipped[5] == ""

    def test_read_back(self, tmp_path, outcomes):
        path = tmp_path / "outcomes.csv"
        write_outcomes(outcomes, str(path))
        restored = read_outcomes(str(path))
        assert [row.status for row in restored] == [row.status for row in outcomes]
        assert restored[1].success is True
        assert restored[0].success is None
        assert restored[1].clean_score == outcomes[1].clean_score
        assert restored[1].iterations == outcomes[1].iterations
        assert restored[10].error == outcomes[10].error

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "broken.csv"
        path.write_text("image_id,label\n0,1\n", encoding="utf-8")
        with pytest.raises(ArgumentError):
            read_outcomes(str(path))


class TestSummaryAndReport:
    """集計とレポート"""

    def test_counts_exclude_skipped_rows(self, outcomes):
        summaries = {summary.attack: summary for summary in summarize(outcomes)}
        fgsm_summary = summaries["fgsm"]
        assert fgsm_summary.attempted == 3
        assert fgsm_summary.succeeded == 2
        assert fgsm_summary.errored == 1
        assert fgsm_summary.success_rate == pytest.approx(2 / 3)

    def test_detection_metrics_from_scores(self):
        rows = [
            _row("clean", STATUS_OK, clean_score=0.1),
            _row("fgsm", STATUS_SUCCESS, clean_score=0.1, adversarial_score=0.9,
                 confidence_after=0.2, target_confidence=0.8),
            _row("clean", STATUS_OK, clean_score=0.2, image_id=1),
            _row("fgsm", STATUS_SUCCESS, clean_score=0.2, adversarial_score=0.8,
                 confidence_after=0.4, target_confidence=0.6, image_id=1),
            _row("clean", STATUS_OK, clean_score=0.3, image_id=2),
            _row("fgsm", STATUS_FAILED, clean_score=0.3, image_id=2),
        ]
        (summary,) = summarize(rows)
        assert summary.auc == pytest.approx(1.0)
        assert summary.mean_confidence_after == pytest.approx(0.3)
        assert summary.mean_target_confidence == pytest.approx(0.7)
        record = summary.to_record()
        assert record["detection_rate_fpr_0.05"] == pytest.approx(1.0)
        assert "precision_fpr_0.1" in record

    def test_no_success_gives_dashes(self):
        rows = [_row("clean", STATUS_OK, clean_score=0.1), _row("deepfool", STATUS_FAILED, clean_score=0.1)]
        text = render_text_report(summarize(rows))
        assert "deepfool" in text
        assert text.rstrip().endswith("mean auc: -")

    def test_histogram_uses_shared_bins(self):
        rows = [_row("clean", STATUS_OK, clean_score=0.0), _row("clean", STATUS_OK, clean_score=1.0),
                _row("fgsm", STATUS_SUCCESS, clean_score=0.0, adversarial_score=0.75)]
        frame = histogram_frame(rows, bins=4)
        assert frame["clean"].tolist() == [1, 0, 0, 1]
        assert frame["adversarial"].tolist() == [0, 0, 0, 1]

    def test_report_is_reproducible_from_csv(self, tmp_path, outcomes):
        csv_path = tmp_path / "outcomes.csv"
        write_outcomes(outcomes, str(csv_path))
        first = report_from_csv(str(csv_path), str(tmp_path / "first"))
        second = report_from_csv(str(csv_path), str(tmp_path / "second"))
        assert set(first) == {"summary_csv", "summary_text", "histogram", "roc"}
        for key in first:
            with open(first[key], "rb") as a, open(second[key], "rb") as b:
                assert a.read() == b.read()
        with open(first["summary_text"], encoding="utf-8") as f:
            assert "mean auc:" in f.read()
