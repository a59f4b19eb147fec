"""
評価ハーネス
services/evaluation_service.py

攻撃 → 特徴応答 → エントロピースコア → 判定 の一連の流れを画像ごとに実行し、
ROC/AUC、固定偽陽性率での検出率、攻撃成功率、信頼度の統計をまとめる。
集計は結果 CSV だけから決まる純粋関数なので、CSV から作り直したレポートは
バイト単位で一致する。
"""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import auc as trapezoid_area
from sklearn.utils import resample

from core.exceptions import ArgumentError, DetectorError, ExperimentAbortedError
from core.network import Network
from services.attack_service import AttackConfig, AttackResult, run_attack
from services.dataset_service import Dataset
from services.detector_service import DetectorConfig, ImageAnalysis, analyze_image
from utils.advanced_logging import logger
from utils.constants import (
    BOOTSTRAP_CONFIDENCE,
    BOOTSTRAP_RESAMPLES,
    BOOTSTRAP_SEED,
    CLEAN_ROW,
    HISTOGRAM_BINS,
    HISTOGRAM_FILE,
    MAX_ERROR_FRACTION,
    REPORT_FPRS,
    ROC_FILE,
    SUMMARY_CSV_FILE,
    SUMMARY_TEXT_FILE,
    ensure_directory_exists,
)

# 行ステータス
STATUS_OK = "ok"
STATUS_MISCLASSIFIED = "misclassified"
STATUS_SUCCESS = "success"
STATUS_FAILED = "failed"
STATUS_ERROR = "error"
STATUS_SKIPPED = "skipped"


# ===== 1行分の結果 =====

@dataclass
class SampleOutcome:
    """
    結果 CSV の1行。画像ごとに clean 行1つ + 攻撃ごとに1行

    adversarial_score は攻撃が成功した行にだけ入る
    """
    image_id: int
    label: int
    attack: str
    status: str
    clean_score: Optional[float] = None
    adversarial_score: Optional[float] = None
    success: Optional[bool] = None
    predicted: Optional[int] = None
    confidence_before: Optional[float] = None
    confidence_after: Optional[float] = None
    target_confidence: Optional[float] = None
    l2_norm: Optional[float] = None
    linf_norm: Optional[float] = None
    iterations: Optional[int] = None
    forward_calls: Optional[int] = None
    gradient_calls: Optional[int] = None
    error: str = ""

    @property
    def is_clean_row(self) -> bool:
        return self.attack == CLEAN_ROW


OUTCOME_COLUMNS = [f.name for f in fields(SampleOutcome)]
_INT_COLUMNS = ("predicted", "iterations", "forward_calls", "gradient_calls")
_FLOAT_COLUMNS = ("clean_score", "adversarial_score", "confidence_before", "confidence_after",
                  "target_confidence", "l2_norm", "linf_norm")

ResultCallback = Callable[[int, AttackResult, ImageAnalysis, Optional[ImageAnalysis]], None]


def sample_seed(seed: int, image_id: int, attack_index: int, attack_seed: Optional[int] = None) -> int:
    """(実験シード, 画像, 攻撃) ごとに独立したシードを導く（並列数に依存しない）"""
    entropy = [int(seed), int(image_id), int(attack_index)]
    if attack_seed is not None:
        entropy.append(int(attack_seed))
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _attack_row(image_id: int, label: int, clean_score: float, config: AttackConfig,
                result: AttackResult, adversarial_score: Optional[float]) -> SampleOutcome:
    return SampleOutcome(
        image_id=image_id,
        label=label,
        attack=config.name,
        status=STATUS_SUCCESS if result.success else STATUS_FAILED,
        clean_score=clean_score,
        adversarial_score=adversarial_score if result.success else None,
        success=result.success,
        predicted=result.predicted,
        confidence_before=result.confidence_before,
        confidence_after=result.confidence_after,
        target_confidence=result.target_confidence,
        l2_norm=result.l2_norm,
        linf_norm=result.linf_norm,
        iterations=result.iterations,
        forward_calls=result.forward_calls,
        gradient_calls=result.gradient_calls,
    )


def process_image(network: Network, image: np.ndarray, label: int, image_id: int,
                  attacks: Sequence[AttackConfig], detector: DetectorConfig, seed: int,
                  on_result: Optional[ResultCallback] = None) -> List[SampleOutcome]:
    """1枚の画像について clean 行と攻撃行を作る。モジュールの例外は行に記録して続行する"""
    label = int(label)
    try:
        clean = analyze_image(network, image, detector)
        predicted = int(np.argmax(network.forward(image).probabilities))
    except (DetectorError, ArithmeticError, ValueError) as e:
        logger.warning(f"Clean scoring failed: {e}", component="experiment", image_id=image_id)
        rows = [SampleOutcome(image_id, label, CLEAN_ROW, STATUS_ERROR, error=str(e))]
        rows += [SampleOutcome(image_id, label, config.name, STATUS_SKIPPED) for config in attacks]
        return rows

    misclassified = predicted != label
    rows = [SampleOutcome(image_id, label, CLEAN_ROW,
                          STATUS_MISCLASSIFIED if misclassified else STATUS_OK,
                          clean_score=clean.score, predicted=predicted)]
    for index, config in enumerate(attacks):
        if misclassified:
            rows.append(SampleOutcome(image_id, label, config.name, STATUS_SKIPPED, clean_score=clean.score))
            continue
        seeded = replace(config, seed=sample_seed(seed, image_id, index, config.seed))
        try:
            result = run_attack(network, image, label, seeded)
            adversarial = analyze_image(network, result.adversarial, detector) if result.success else None
        except (DetectorError, ArithmeticError, ValueError) as e:
            logger.warning(f"Attack failed with error: {e}", component="experiment",
                           image_id=image_id, attack=config.name)
            rows.append(SampleOutcome(image_id, label, config.name, STATUS_ERROR,
                                      clean_score=clean.score, error=f"{type(e).__name__}: {e}"))
            continue
        rows.append(_attack_row(image_id, label, clean.score, config, result,
                                adversarial.score if adversarial else None))
        if on_result is not None:
            on_result(image_id, result, clean, adversarial)
    return rows


def run_experiment(network: Network, dataset: Dataset, attacks: Sequence[AttackConfig],
                   detector: DetectorConfig, seed: int, image_ids: Optional[Sequence[int]] = None,
                   jobs: int = 1, on_result: Optional[ResultCallback] = None) -> List[SampleOutcome]:
    """
    データセットの全画像に対して実験を行う

    Args:
        network: 学習済みネットワーク
        dataset: 評価対象（空は不可）
        attacks: 攻撃設定のリスト（空なら clean 行のみ）
        detector: 検出器設定
        seed: 実験シード
        image_ids: 出力に記録する画像 ID（省略時は 0..N-1）
        jobs: 画像単位の並列数（結果は jobs に依存しない）
        on_result: 攻撃ごとに呼ばれるコールバック（画像の書き出し用）

    Returns:
        image_id 順・各画像内は clean → 攻撃設定順 の SampleOutcome リスト

    Raises:
        ExperimentAbortedError: エラー行が半数を超えた
    """
    if len(dataset) == 0:
        raise ArgumentError("評価データセットが空です")
    detector.validate()
    for config in attacks:
        config.validate()
    ids = np.arange(len(dataset)) if image_ids is None else np.asarray(image_ids, dtype=np.int64)
    if len(ids) != len(dataset):
        raise ArgumentError(f"image_ids の数 {len(ids)} がデータセットの件数 {len(dataset)} と一致しません")
    logger.log_experiment_event("started", images=len(dataset), attacks=[c.name for c in attacks],
                                seed=seed, jobs=jobs)

    def work(position: int) -> List[SampleOutcome]:
        return process_image(network, dataset.images[position], int(dataset.labels[position]),
                             int(ids[position]), attacks, detector, seed, on_result)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            per_image = list(executor.map(work, range(len(dataset))))
    else:
        per_image = [work(position) for position in range(len(dataset))]

    order = np.argsort(ids, kind="stable")
    outcomes = [row for position in order for row in per_image[position]]
    errors = sum(row.status == STATUS_ERROR for row in outcomes)
    if errors > MAX_ERROR_FRACTION * len(outcomes):
        raise ExperimentAbortedError(f"{errors}/{len(outcomes)} 行がエラーのため実験を中断しました")
    logger.log_experiment_event("finished", rows=len(outcomes), errors=errors)
    return outcomes


# ===== 結果 CSV =====

def outcomes_frame(outcomes: Sequence[SampleOutcome]) -> pd.DataFrame:
    records = [{name: getattr(row, name) for name in OUTCOME_COLUMNS} for row in outcomes]
    return pd.DataFrame.from_records(records, columns=OUTCOME_COLUMNS)


def write_outcomes(outcomes: Sequence[SampleOutcome], path: str):
    """ヘッダー付き CSV で保存（欠損は空欄）"""
    frame = outcomes_frame(outcomes)
    for column in _INT_COLUMNS:
        frame[column] = frame[column].astype("Int64")
    frame.to_csv(path, index=False, na_rep="", lineterminator="\n")


def _optional(value, cast):
    if value is None or (isinstance(value, float) and math.isnan(value)) or value is pd.NA:
        return None
    return cast(value)


def _to_bool(value) -> bool:
    if isinstance(value, str):
        return value.strip().lower() == "true"
    return bool(value)


def read_outcomes(path: str) -> List[SampleOutcome]:
    """write_outcomes の逆変換"""
    frame = pd.read_csv(path, float_precision="round_trip", dtype={"attack": str, "status": str, "error": str},
                        keep_default_na=False, na_values=[""])
    missing = [column for column in OUTCOME_COLUMNS if column not in frame.columns]
    if missing:
        raise ArgumentError(f"{path}: 列 {missing} がありません")
    outcomes = []
    for record in frame.to_dict(orient="records"):
        kwargs = {
            "image_id": int(record["image_id"]),
            "label": int(record["label"]),
            "attack": str(record["attack"]),
            "status": str(record["status"]),
            "success": _optional(record["success"], _to_bool),
            "error": "" if _optional(record["error"], str) is None else str(record["error"]),
        }
        kwargs.update({column: _optional(record[column], float) for column in _FLOAT_COLUMNS})
        kwargs.update({column: _optional(record[column], int) for column in _INT_COLUMNS})
        outcomes.append(SampleOutcome(**kwargs))
    return outcomes


# ===== ROC =====

@dataclass(frozen=True)
class RocCurve:
    """
    しきい値を下げながら並べた (τ, FPR, TPR) の点列

    陽性 = 敵対的スコア、判定は score > τ
    """
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    negatives: int
    positives: int


def roc(clean_scores: Sequence[float], adversarial_scores: Sequence[float]) -> RocCurve:
    """
    clean / 敵対的スコアから ROC を求める

    しきい値は +∞、全スコアの一意値（降順）、−∞。端点 (0,0) と (1,1) を必ず含む
    """
    clean = np.sort(np.asarray(clean_scores, dtype=np.float64))
    adversarial = np.sort(np.asarray(adversarial_scores, dtype=np.float64))
    if clean.size == 0 or adversarial.size == 0:
        raise ArgumentError("ROC には clean と敵対的の両方のスコアが必要です")
    unique = np.unique(np.concatenate([clean, adversarial]))[::-1]
    thresholds = np.concatenate([[np.inf], unique, [-np.inf]])
    false_positives = clean.size - np.searchsorted(clean, thresholds, side="right")
    true_positives = adversarial.size - np.searchsorted(adversarial, thresholds, side="right")
    fpr = false_positives / clean.size
    tpr = true_positives / adversarial.size
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=float(trapezoid_area(fpr, tpr)),
                    negatives=int(clean.size), positives=int(adversarial.size))


def _operating_point(curve: RocCurve, fpr: float) -> int:
    if not 0.0 < fpr < 1.0:
        raise ArgumentError(f"fpr は (0, 1) の範囲: {fpr}")
    eligible = np.flatnonzero(curve.fpr <= fpr + 1e-12)
    return int(eligible[np.argmax(curve.tpr[eligible])])


def detection_rate_at_fpr(curve: RocCurve, fpr: float) -> float:
    """FPR ≤ fpr で達成できる最大の TPR"""
    return float(curve.tpr[_operating_point(curve, fpr)])


def precision_at_fpr(curve: RocCurve, fpr: float) -> float:
    """検出率を与える動作点での適合率（検出 0 件なら NaN）"""
    point = _operating_point(curve, fpr)
    true_positives = curve.tpr[point] * curve.positives
    false_positives = curve.fpr[point] * curve.negatives
    total = true_positives + false_positives
    return float(true_positives / total) if total > 0 else float("nan")


def bootstrap_auc_ci(clean_scores: Sequence[float], adversarial_scores: Sequence[float],
                     resamples: int = BOOTSTRAP_RESAMPLES, confidence: float = BOOTSTRAP_CONFIDENCE,
                     seed: int = BOOTSTRAP_SEED):
    """clean / 敵対的それぞれを復元抽出した AUC のパーセンタイル信頼区間"""
    random_state = np.random.RandomState(seed)
    clean = np.asarray(clean_scores, dtype=np.float64)
    adversarial = np.asarray(adversarial_scores, dtype=np.float64)
    areas = np.empty(resamples)
    for index in range(resamples):
        areas[index] = roc(resample(clean, random_state=random_state),
                           resample(adversarial, random_state=random_state)).auc
    tail = (1.0 - confidence) / 2.0 * 100.0
    low, high = np.percentile(areas, [tail, 100.0 - tail])
    return float(low), float(high)


# ===== 集計 =====

@dataclass
class AttackSummary:
    """攻撃ごとの集計（成功 0 件なら検出関連は NaN）"""
    attack: str
    attempted: int
    succeeded: int
    failed: int
    errored: int
    success_rate: float
    mean_confidence_after: float
    mean_target_confidence: float
    detection_rates: Dict[float, float] = field(default_factory=dict)
    precisions: Dict[float, float] = field(default_factory=dict)
    auc: float = float("nan")
    auc_ci_low: float = float("nan")
    auc_ci_high: float = float("nan")
    curve: Optional[RocCurve] = None

    def to_record(self) -> Dict[str, float]:
        record = {
            "attack": self.attack,
            "attempted": self.attempted,
            "succeeded": self.succeeded,
            "failed": self.failed,
            "errored": self.errored,
            "success_rate": self.success_rate,
            "mean_confidence_after": self.mean_confidence_after,
            "mean_target_confidence": self.mean_target_confidence,
        }
        for fpr in REPORT_FPRS:
            record[f"detection_rate_fpr_{fpr:g}"] = self.detection_rates.get(fpr, float("nan"))
        for fpr in REPORT_FPRS:
            record[f"precision_fpr_{fpr:g}"] = self.precisions.get(fpr, float("nan"))
        record.update(auc=self.auc, auc_ci_low=self.auc_ci_low, auc_ci_high=self.auc_ci_high)
        return record


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def summarize(outcomes: Sequence[SampleOutcome]) -> List[AttackSummary]:
    """攻撃名の初出順に AttackSummary を作る"""
    names: List[str] = []
    for row in outcomes:
        if not row.is_clean_row and row.attack not in names:
            names.append(row.attack)

    summaries = []
    for name in names:
        rows = [row for row in outcomes if row.attack == name and row.status != STATUS_SKIPPED]
        successes = [row for row in rows if row.status == STATUS_SUCCESS]
        summary = AttackSummary(
            attack=name,
            attempted=len(rows),
            succeeded=len(successes),
            failed=sum(row.status == STATUS_FAILED for row in rows),
            errored=sum(row.status == STATUS_ERROR for row in rows),
            success_rate=len(successes) / len(rows) if rows else float("nan"),
            mean_confidence_after=_mean([row.confidence_after for row in successes]),
            mean_target_confidence=_mean([row.target_confidence for row in successes]),
        )
        clean_scores = [row.clean_score for row in rows if row.clean_score is not None]
        adversarial_scores = [row.adversarial_score for row in successes if row.adversarial_score is not None]
        if clean_scores and adversarial_scores:
            curve = roc(clean_scores, adversarial_scores)
            summary.curve = curve
            summary.auc = curve.auc
            summary.detection_rates = {fpr: detection_rate_at_fpr(curve, fpr) for fpr in REPORT_FPRS}
            summary.precisions = {fpr: precision_at_fpr(curve, fpr) for fpr in REPORT_FPRS}
            summary.auc_ci_low, summary.auc_ci_high = bootstrap_auc_ci(clean_scores, adversarial_scores)
        summaries.append(summary)
    return summaries


# ===== レポート =====

def summary_frame(summaries: Sequence[AttackSummary]) -> pd.DataFrame:
    return pd.DataFrame.from_records([summary.to_record() for summary in summaries])


def _cell(value, pattern: str = "{:.4f}") -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return pattern.format(value)


def render_text_report(summaries: Sequence[AttackSummary]) -> str:
    """人が読むための固定幅テーブル"""
    header = ["attack", "attempted", "success", "gt_conf", "tgt_conf"]
    header += [f"det@{fpr:.0%}" for fpr in REPORT_FPRS] + ["auc", "auc_95ci"]
    lines = [" ".join(f"{title:>11}" for title in header)]
    for summary in summaries:
        cells = [
            summary.attack,
            str(summary.attempted),
            _cell(summary.success_rate),
            _cell(summary.mean_confidence_after),
            _cell(summary.mean_target_confidence),
        ]
        cells += [_cell(summary.detection_rates.get(fpr)) for fpr in REPORT_FPRS]
        cells.append(_cell(summary.auc))
        if math.isnan(summary.auc_ci_low):
            cells.append("-")
        else:
            cells.append(f"{summary.auc_ci_low:.3f}-{summary.auc_ci_high:.3f}")
        lines.append(" ".join(f"{cell:>11}" for cell in cells))
    aucs = [summary.auc for summary in summaries if not math.isnan(summary.auc)]
    lines.append("")
    lines.append(f"mean auc: {_cell(_mean(aucs))}")
    return "\n".join(lines) + "\n"


def histogram_frame(outcomes: Sequence[SampleOutcome], bins: int = HISTOGRAM_BINS) -> pd.DataFrame:
    """clean / 成功した敵対的サンプルの s̄ を共通のビンで数える"""
    clean = [row.clean_score for row in outcomes if row.is_clean_row and row.status == STATUS_OK]
    adversarial = [row.adversarial_score for row in outcomes
                   if row.status == STATUS_SUCCESS and row.adversarial_score is not None]
    values = np.asarray(clean + adversarial, dtype=np.float64)
    if values.size == 0:
        return pd.DataFrame(columns=["bin_left", "bin_right", "clean", "adversarial"])
    edges = np.histogram_bin_edges(values, bins=bins)
    clean_counts, _ = np.histogram(np.asarray(clean, dtype=np.float64), bins=edges)
    adversarial_counts, _ = np.histogram(np.asarray(adversarial, dtype=np.float64), bins=edges)
    return pd.DataFrame({
        "bin_left": edges[:-1],
        "bin_right": edges[1:],
        "clean": clean_counts,
        "adversarial": adversarial_counts,
    })


def roc_frame(summaries: Sequence[AttackSummary]) -> pd.DataFrame:
    frames = [
        pd.DataFrame({"attack": summary.attack, "threshold": summary.curve.thresholds,
                      "fpr": summary.curve.fpr, "tpr": summary.curve.tpr})
        for summary in summaries if summary.curve is not None
    ]
    if not frames:
        return pd.DataFrame(columns=["attack", "threshold", "fpr", "tpr"])
    return pd.concat(frames, ignore_index=True)


def write_report(outcomes: Sequence[SampleOutcome], out_dir: str) -> Dict[str, str]:
    """
    summary.csv / summary.txt / histogram.csv / roc.csv を書き出す

    Returns:
        {種類: パス}
    """
    ensure_directory_exists(out_dir)
    summaries = summarize(outcomes)
    paths = {
        "summary_csv": os.path.join(out_dir, SUMMARY_CSV_FILE),
        "summary_text": os.path.join(out_dir, SUMMARY_TEXT_FILE),
        "histogram": os.path.join(out_dir, HISTOGRAM_FILE),
        "roc": os.path.join(out_dir, ROC_FILE),
    }
    summary_frame(summaries).to_csv(paths["summary_csv"], index=False, na_rep="", lineterminator="\n")
    with open(paths["summary_text"], "w", encoding="utf-8", newline="\n") as f:
        f.write(render_text_report(summaries))
    histogram_frame(outcomes).to_csv(paths["histogram"], index=False, lineterminator="\n")
    roc_frame(summaries).to_csv(paths["roc"], index=False, lineterminator="\n")
    logger.log_experiment_event("report written", out_dir=out_dir, attacks=len(summaries))
    return paths


def report_from_csv(outcomes_path: str, out_dir: str) -> Dict[str, str]:
    """結果 CSV からレポートを作る（eval と report で同じ経路を通す）"""
    return write_report(read_outcomes(outcomes_path), out_dir)
