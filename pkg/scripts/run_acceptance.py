"""
受け入れ確認スクリプト
scripts/run_acceptance.py

合成データ（または MNIST の IDX ファイル）で 学習 → 5種の攻撃 → 検出 を通しで実行し、
学習精度・攻撃の妥当性・検出の方向性を確認する。単体テストより時間がかかるため tests/ には置かない。

使い方:
    python scripts/run_acceptance.py --seed 0 --out-dir runs/acceptance
    python scripts/run_acceptance.py --seed 0 --train-images train-images-idx3-ubyte.gz ...
"""
import argparse
import os
import sys
import threading

import numpy as np

# プロジェクトルートディレクトリをPythonパスに追加
script_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(script_dir)
sys.path.insert(0, project_root)

from core.network import Network, Parameters, reference_spec
from services.attack_service import (
    BoundaryConfig,
    DeepFoolConfig,
    FgsmConfig,
    GradientConfig,
    OnePixelConfig,
)
from services.dataset_service import Dataset, load_idx, synth_shapes
from services.detector_service import DetectorConfig
from services.evaluation_service import (
    STATUS_SUCCESS,
    run_experiment,
    summarize,
    write_outcomes,
    write_report,
)
from services.training_service import TrainingSchedule, accuracy, train
from services.weight_store import save_weights
from utils.advanced_logging import logger
from utils.constants import OUTCOMES_FILE, ensure_directory_exists

MIN_ACCURACY = 0.95
MIN_FGSM_SUCCESS = 0.5
MIN_DEEPFOOL_SUCCESS = 0.9


class Checklist:
    """判定結果を集めて最後にまとめて表示する"""

    def __init__(self):
        self.results = []

    def check(self, name: str, passed: bool, detail: str):
        self.results.append((name, passed, detail))
        print(f"[ACCEPTANCE] {'PASS' if passed else 'FAIL'} {name}: {detail}")

    @property
    def passed(self) -> bool:
        return all(passed for _, passed, _ in self.results)


class AttackTrace:
    """攻撃ごとの疎性と距離履歴を記録するコールバック"""

    def __init__(self):
        self._lock = threading.Lock()
        self.one_pixel_counts = []
        self.boundary_violations = 0

    def __call__(self, image_id, result, clean, adversarial):
        with self._lock:
            if result.attack == "one_pixel":
                changed = np.any(result.perturbation != 0, axis=0)
                self.one_pixel_counts.append(int(np.count_nonzero(changed)))
            elif result.attack == "boundary":
                if np.any(np.diff(result.history) > 1e-9):
                    self.boundary_violations += 1
                if result.success and result.predicted == result.label:
                    self.boundary_violations += 1


def load_data(args):
    """(学習データ, 評価データ)"""
    if args.train_images:
        train_set = load_idx(args.train_images, args.train_labels)
        test_set = load_idx(args.test_images, args.test_labels)
    else:
        train_set = synth_shapes(args.synth_count, seed=args.seed)
        test_set = synth_shapes(args.test_count, seed=args.seed + 1)
    print(f"[ACCEPTANCE] 学習データ {len(train_set)} 件 / 評価データ {len(test_set)} 件")
    return train_set, test_set


def correctly_classified(network: Network, dataset: Dataset, count: int):
    """正しく分類された先頭 count 件と、その元のインデックス"""
    predicted = network.predict_probabilities(dataset.images).argmax(axis=1)
    ids = np.flatnonzero(predicted == dataset.labels)[:count]
    return dataset.subset(ids, provenance=f"{dataset.provenance} correct"), ids


def run(args) -> bool:
    checklist = Checklist()
    ensure_directory_exists(args.out_dir)
    train_set, test_set = load_data(args)

    # 1. 学習
    spec = reference_spec(train_set.image_shape, train_set.num_classes)
    schedule = TrainingSchedule(seed=args.seed)
    params, history = train(spec, Parameters.initialize(spec, args.seed), train_set, schedule)
    save_weights(spec, params, os.path.join(args.out_dir, "weights.fsnt"))
    network = Network(spec, params)
    test_accuracy = accuracy(network, test_set)
    checklist.check("training", test_accuracy >= MIN_ACCURACY,
                    f"held-out accuracy {test_accuracy:.4f} after {history[-1].epoch} epochs")

    # 2. 攻撃と検出
    samples, ids = correctly_classified(network, test_set, args.samples)
    attacks = [
        FgsmConfig(epsilon=0.1),
        GradientConfig(step_size=1.0),
        DeepFoolConfig(max_iterations=50, overshoot=0.02),
        OnePixelConfig(pixels=1, population=args.population, generations=args.generations, seed=args.seed),
        BoundaryConfig(max_steps=args.boundary_steps, seed=args.seed),
    ]
    trace = AttackTrace()
    outcomes = run_experiment(network, samples, attacks, DetectorConfig(), seed=args.seed,
                              image_ids=ids, jobs=args.jobs, on_result=trace)
    write_outcomes(outcomes, os.path.join(args.out_dir, OUTCOMES_FILE))
    write_report(outcomes, args.out_dir)
    summaries = {summary.attack: summary for summary in summarize(outcomes)}

    fgsm_summary = summaries["fgsm"]
    deepfool_summary = summaries["deepfool"]
    checklist.check("fgsm success", fgsm_summary.success_rate >= MIN_FGSM_SUCCESS,
                    f"{fgsm_summary.succeeded}/{fgsm_summary.attempted}")
    checklist.check("deepfool success", deepfool_summary.success_rate >= MIN_DEEPFOOL_SUCCESS,
                    f"{deepfool_summary.succeeded}/{deepfool_summary.attempted}")

    def succeeded(attack: str) -> dict:
        return {row.image_id: row.l2_norm for row in outcomes
                if row.attack == attack and row.status == STATUS_SUCCESS}

    # 両方の攻撃が成功した画像だけで比べる
    deepfool_norms, fgsm_norms = succeeded("deepfool"), succeeded("fgsm")
    shared = sorted(set(deepfool_norms) & set(fgsm_norms))
    if shared:
        deepfool_l2 = float(np.median([deepfool_norms[i] for i in shared]))
        fgsm_l2 = float(np.median([fgsm_norms[i] for i in shared]))
    else:
        deepfool_l2 = fgsm_l2 = float("nan")
    checklist.check("deepfool distance", deepfool_l2 < fgsm_l2,
                    f"median l2 over {len(shared)} shared images deepfool {deepfool_l2:.4f} / fgsm {fgsm_l2:.4f}")
    checklist.check("one-pixel sparsity", max(trace.one_pixel_counts, default=0) <= 1,
                    f"max changed pixels {max(trace.one_pixel_counts, default=0)}")
    checklist.check("boundary walk", trace.boundary_violations == 0,
                    f"{trace.boundary_violations} violations")

    # 3. 検出の方向性（FGSM）
    clean_scores = [row.clean_score for row in outcomes if row.attack == "fgsm" and row.status == STATUS_SUCCESS]
    adversarial_scores = [row.adversarial_score for row in outcomes
                          if row.attack == "fgsm" and row.status == STATUS_SUCCESS]
    if clean_scores:
        checklist.check("entropy direction", np.mean(adversarial_scores) > np.mean(clean_scores),
                        f"mean adversarial {np.mean(adversarial_scores):.4f} / clean {np.mean(clean_scores):.4f}")
    checklist.check("fgsm auc", fgsm_summary.auc > 0.5 and fgsm_summary.auc_ci_low > 0.5,
                    f"auc {fgsm_summary.auc:.4f} ci [{fgsm_summary.auc_ci_low:.4f}, {fgsm_summary.auc_ci_high:.4f}]")

    for name, summary in summaries.items():
        print(f"[ACCEPTANCE] {name}: success {summary.success_rate:.3f} auc {summary.auc:.4f}")
    logger.log_experiment_event("acceptance finished", passed=checklist.passed,
                                failed=[name for name, passed, _ in checklist.results if not passed])
    return checklist.passed


def main():
    parser = argparse.ArgumentParser(description="学習・攻撃・検出の受け入れ確認")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", default="runs/acceptance")
    parser.add_argument("--samples", type=int, default=200, help="攻撃する正分類画像の数")
    parser.add_argument("--synth-count", type=int, default=2000)
    parser.add_argument("--test-count", type=int, default=500)
    parser.add_argument("--population", type=int, default=200)
    parser.add_argument("--generations", type=int, default=100)
    parser.add_argument("--boundary-steps", type=int, default=1000)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--train-images")
    parser.add_argument("--train-labels")
    parser.add_argument("--test-images")
    parser.add_argument("--test-labels")
    args = parser.parse_args()

    if args.train_images and not all([args.train_labels, args.test_images, args.test_labels]):
        parser.error("IDX を使う場合は学習・評価の画像とラベルをすべて指定してください")

    passed = run(args)
    print(f"[ACCEPTANCE] {'全項目合格' if passed else '不合格の項目があります'}")
    sys.exit(0 if passed else 1)


if __name__ == "__main__":
    main()
