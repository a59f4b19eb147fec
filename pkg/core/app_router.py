"""
アプリケーションルーター（コマンドライン）
core/app_router.py

サブコマンド:
    config   既定の設定文書を表示
    train    ネットワークを学習して重みと metrics.csv を保存
    attack   攻撃を実行して outcomes.csv（と任意で画像）を保存
    featmap  1枚の画像の特徴応答とエントロピーマップを PGM で保存（--channels でチャネル別も）
    detect   1枚の画像を判定（clean=0 / attacked=1）
    eval     攻撃 + 検出の評価とレポート
    report   outcomes.csv からレポートを作り直す

終了コード: 0 成功/clean, 1 attacked, 2 設定・引数エラー, 3 数値エラー, 4 入出力エラー
"""
import argparse
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from config.experiment_config import ExperimentConfig, default_config_dict
from config.unified_config import UnifiedConfig
from core.exceptions import DetectorError, exit_code_for
from core.network import Network, Parameters, reference_spec
from services.attack_service import AttackResult
from services.dataset_service import Dataset, image_ids_for, load_idx, select_samples, synth_shapes
from services.detector_service import (
    DetectorConfig,
    ImageAnalysis,
    Verdict,
    analyze_image,
    decide,
    save_entropy_map,
)
from services.evaluation_service import report_from_csv, run_experiment, write_outcomes
from services.feature_response_service import save_grayscale, save_response_channels
from services.training_service import train
from services.weight_store import load_weights, save_weights
from utils.advanced_logging import logger
from utils.constants import (
    APP_DESCRIPTION,
    EXIT_ATTACKED,
    EXIT_SUCCESS,
    IMAGES_DIR,
    METRICS_FILE,
    OUTCOMES_FILE,
    ensure_directory_exists,
)
from utils.netpbm import encode_netpbm, load_image, save_image


# ===== データ =====

def load_split(config: ExperimentConfig, split: str) -> Dataset:
    """設定に従って学習用（train）または評価用（test）のデータセットを読む"""
    dataset = config.dataset
    if dataset.source == "synth":
        if split == "train":
            return synth_shapes(dataset.synth_train_count, dataset.synth_seed)
        return synth_shapes(dataset.synth_test_count, dataset.synth_seed + 1)
    return load_idx(getattr(dataset, f"{split}_images"), getattr(dataset, f"{split}_labels"),
                    num_classes=dataset.num_classes)


def evaluation_slice(config: ExperimentConfig):
    """評価対象の画像と、出力に記録する元データセットでのインデックス"""
    full = load_split(config, "test")
    dataset = config.dataset
    ids = image_ids_for(full, dataset.sample_count, dataset.sample_start, dataset.selection)
    samples = select_samples(full, dataset.sample_count, dataset.sample_start, dataset.selection)
    return samples, ids


def load_network(path: str) -> Network:
    spec, params = load_weights(path)
    return Network(spec, params)


# ===== 画像の書き出し =====

def difference_pixels(perturbation: np.ndarray) -> np.ndarray:
    """η を 128 + 127·η/max|η| の 8bit 画像にする（差 0 は中間の灰色）"""
    peak = float(np.max(np.abs(perturbation))) if perturbation.size else 0.0
    scaled = perturbation / peak if peak > 0 else np.zeros_like(perturbation)
    return np.rint(128.0 + 127.0 * scaled).astype(np.uint8)


def image_dumper(directory: str):
    """攻撃ごとに 原画像 / 差分 / 敵対的画像 と両者の特徴応答を書き出すコールバック"""
    ensure_directory_exists(directory)

    def dump(image_id: int, result: AttackResult, clean: ImageAnalysis, adversarial: Optional[ImageAnalysis]):
        prefix = os.path.join(directory, f"{image_id:05d}_{result.attack}")
        save_image(result.original, f"{prefix}_original.pgm")
        with open(f"{prefix}_difference.pgm", "wb") as f:
            f.write(encode_netpbm(difference_pixels(result.perturbation)))
        save_image(result.adversarial, f"{prefix}_adversarial.pgm")
        save_grayscale(clean.gray, f"{prefix}_original_response.pgm")
        if adversarial is not None:
            save_grayscale(adversarial.gray, f"{prefix}_adversarial_response.pgm")

    return dump


# ===== サブコマンド =====

def cmd_config(args) -> int:
    if args.print_defaults:
        print(json.dumps(default_config_dict(), indent=2, ensure_ascii=False))
        return EXIT_SUCCESS
    config = ExperimentConfig.load(args.config, args.set)
    print(json.dumps(config.to_dict(), indent=2, ensure_ascii=False))
    return EXIT_SUCCESS


def cmd_train(args) -> int:
    config = ExperimentConfig.load(args.config, args.set)
    config.require_dataset_files(["train"])
    dataset = load_split(config, "train")
    spec = reference_spec(dataset.image_shape, dataset.num_classes)
    params = Parameters.initialize(spec, config.seed)
    params, history = train(spec, params, dataset, config.training.schedule(config.seed))

    save_weights(spec, params, config.weights)
    ensure_directory_exists(config.output_dir)
    metrics_path = os.path.join(config.output_dir, METRICS_FILE)
    pd.DataFrame([metrics.to_dict() for metrics in history]).to_csv(
        metrics_path, index=False, lineterminator="\n")
    final = history[-1]
    print(f"trained {final.epoch} epochs: loss={final.train_loss:.4f} "
          f"holdout_accuracy={final.holdout_accuracy:.4f} weights={config.weights}")
    return EXIT_SUCCESS


def _run_outcomes(config: ExperimentConfig, jobs: int, dump_images: bool = False) -> str:
    config.require_weights()
    config.require_dataset_files(["test"])
    network = load_network(config.weights)
    samples, ids = evaluation_slice(config)
    on_result = image_dumper(os.path.join(config.output_dir, IMAGES_DIR)) if dump_images else None
    outcomes = run_experiment(network, samples, config.attacks, config.detector, config.seed,
                              image_ids=ids, jobs=jobs, on_result=on_result)
    ensure_directory_exists(config.output_dir)
    path = os.path.join(config.output_dir, OUTCOMES_FILE)
    write_outcomes(outcomes, path)
    print(f"{len(outcomes)} outcome rows written to {path}")
    return path


def cmd_attack(args) -> int:
    config = ExperimentConfig.load(args.config, args.set)
    _run_outcomes(config, args.jobs, dump_images=args.dump_images)
    return EXIT_SUCCESS


def cmd_eval(args) -> int:
    config = ExperimentConfig.load(args.config, args.set)
    outcomes_path = _run_outcomes(config, args.jobs)
    paths = report_from_csv(outcomes_path, config.output_dir)
    with open(paths["summary_text"], "r", encoding="utf-8") as f:
        print(f.read(), end="")
    return EXIT_SUCCESS


def cmd_report(args) -> int:
    paths = report_from_csv(args.outcomes, args.out_dir)
    with open(paths["summary_text"], "r", encoding="utf-8") as f:
        print(f.read(), end="")
    return EXIT_SUCCESS


def _detector_from_args(args, threshold: Optional[float] = None) -> DetectorConfig:
    config = DetectorConfig(patch_size=args.patch_size, stride=args.stride, mode=args.mode,
                            bins=args.bins, threshold=threshold)
    config.validate()
    return config


def cmd_featmap(args) -> int:
    detector = _detector_from_args(args)
    network = load_network(args.weights)
    analysis = analyze_image(network, load_image(args.image), detector)
    ensure_directory_exists(args.out_dir)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    response_path = os.path.join(args.out_dir, f"{stem}_response.pgm")
    entropy_path = os.path.join(args.out_dir, f"{stem}_entropy.pgm")
    save_grayscale(analysis.gray, response_path)
    save_entropy_map(analysis.entropy_map, entropy_path)
    if args.channels:
        save_response_channels(analysis.response, os.path.join(args.out_dir, f"{stem}_response"))
    print(f"score={analysis.score:.6f} patches={analysis.entropy_map.patch_count} "
          f"response={response_path} entropy={entropy_path}")
    return EXIT_SUCCESS


def cmd_detect(args) -> int:
    detector = _detector_from_args(args, threshold=args.threshold)
    network = load_network(args.weights)
    analysis = analyze_image(network, load_image(args.image), detector)
    verdict = decide(analysis.score, detector.threshold)
    print(f"{verdict.value} score={analysis.score:.6f} threshold={detector.threshold:g}")
    logger.info("Detection verdict", component="detector", verdict=verdict.value,
                score=analysis.score, threshold=detector.threshold, image=args.image)
    return EXIT_ATTACKED if verdict is Verdict.ATTACKED else EXIT_SUCCESS


# ===== 引数 =====

def _add_experiment_arguments(parser: argparse.ArgumentParser, jobs: bool = False):
    parser.add_argument("--config", help="実験設定 JSON")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="設定の上書き（例: attacks.0.epsilon=0.2）")
    if jobs:
        parser.add_argument("--jobs", type=int, default=UnifiedConfig.default_jobs(),
                            help="画像単位の並列数")


def _add_detector_arguments(parser: argparse.ArgumentParser):
    defaults = DetectorConfig()
    parser.add_argument("--weights", required=True, help="重みファイル")
    parser.add_argument("--image", required=True, help="入力画像（PGM/PPM）")
    parser.add_argument("--patch-size", type=int, default=defaults.patch_size)
    parser.add_argument("--stride", type=int, default=defaults.stride)
    parser.add_argument("--bins", type=int, default=defaults.bins)
    parser.add_argument("--mode", default=defaults.mode, choices=["histogram", "cooccurrence", "spatial"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.py", description=APP_DESCRIPTION)
    parser.add_argument("--version", action="version",
                        version=f"{UnifiedConfig.APP_NAME} {UnifiedConfig.APP_VERSION}")
    commands = parser.add_subparsers(dest="command", required=True)

    config = commands.add_parser("config", help="設定文書を表示")
    config.add_argument("--print-defaults", action="store_true")
    _add_experiment_arguments(config)
    config.set_defaults(handler=cmd_config)

    train_parser = commands.add_parser("train", help="ネットワークを学習")
    _add_experiment_arguments(train_parser)
    train_parser.set_defaults(handler=cmd_train)

    attack = commands.add_parser("attack", help="攻撃を実行して outcomes.csv を保存")
    _add_experiment_arguments(attack, jobs=True)
    attack.add_argument("--dump-images", action="store_true", help="原画像・差分・敵対的画像を PGM で保存")
    attack.set_defaults(handler=cmd_attack)

    featmap = commands.add_parser("featmap", help="特徴応答とエントロピーマップを保存")
    _add_detector_arguments(featmap)
    featmap.add_argument("--out-dir", required=True)
    featmap.add_argument("--channels", action="store_true", help="チャネルごとの応答も <stem>_response_c{i}.pgm に保存")
    featmap.set_defaults(handler=cmd_featmap)

    detect = commands.add_parser("detect", help="1枚の画像を判定")
    _add_detector_arguments(detect)
    detect.add_argument("--threshold", type=float, required=True)
    detect.set_defaults(handler=cmd_detect)

    evaluate = commands.add_parser("eval", help="攻撃と検出を評価してレポートを作成")
    _add_experiment_arguments(evaluate, jobs=True)
    evaluate.set_defaults(handler=cmd_eval)

    report = commands.add_parser("report", help="outcomes.csv からレポートを作成")
    report.add_argument("--outcomes", required=True)
    report.add_argument("--out-dir", required=True)
    report.set_defaults(handler=cmd_report)
    return parser


def route_application(argv: Optional[Sequence[str]] = None) -> int:
    """コマンドラインを解釈してサブコマンドを実行し、終了コードを返す"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        return args.handler(args)
    except (DetectorError, OSError) as e:
        code = exit_code_for(e)
        logger.error(f"Command {args.command} failed", exception=e, component="cli", exit_code=code)
        print(f"error: {e}", file=sys.stderr)
        return code
