"""
実験設定
config/experiment_config.py

1つの JSON 文書で学習・攻撃・評価の全パラメータを表す。
既定値の上に文書をマージし、さらに --set a.b.c=value で上書きする。
"""
import copy
import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence

from config.unified_config import UnifiedConfig
from core.exceptions import ArgumentError, ConfigError
from services.attack_service import AttackConfig, attack_config_from_dict
from services.detector_service import DetectorConfig
from services.training_service import TrainingSchedule

DATASET_SOURCES = ("synth", "idx")
SELECTIONS = ("sequential", "by_class")


@dataclass(frozen=True)
class DatasetConfig:
    """データの取得元と評価用の切り出し方"""
    source: str = "synth"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    num_classes: int = 10
    synth_train_count: int = 2000
    synth_test_count: int = 500
    synth_seed: int = 0
    sample_count: int = 100
    sample_start: int = 0
    selection: str = "sequential"

    def validate(self):
        if self.source not in DATASET_SOURCES:
            raise ConfigError("dataset.source", f"{self.source!r} は {DATASET_SOURCES} のいずれか")
        if self.selection not in SELECTIONS:
            raise ConfigError("dataset.selection", f"{self.selection!r} は {SELECTIONS} のいずれか")
        if self.sample_count < 1 or self.sample_start < 0:
            raise ConfigError("dataset.sample_count", "sample_count >= 1, sample_start >= 0 が必要です")
        if self.synth_train_count < 1 or self.synth_test_count < 1:
            raise ConfigError("dataset.synth_train_count", "合成データの件数は 1 以上")


@dataclass(frozen=True)
class TrainingConfig:
    """学習ハイパーパラメータ（シードは実験シードを使う）"""
    epochs: int = 6
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 0.5
    decay_every: int = 2
    holdout_fraction: float = 0.1

    def schedule(self, seed: int) -> TrainingSchedule:
        try:
            return TrainingSchedule(seed=seed, **{f.name: getattr(self, f.name) for f in fields(self)})
        except ArgumentError as e:
            raise ConfigError("training", str(e))


DEFAULT_ATTACKS = [
    {"name": "fgsm", "epsilon": 0.1},
    {"name": "gradient", "step_size": 1.0},
    {"name": "deepfool", "max_iterations": 50, "overshoot": 0.02},
    {"name": "one_pixel", "pixels": 1, "population": 200, "mutation": 0.5, "generations": 100},
    {"name": "boundary", "max_steps": 1000, "orthogonal_step": 0.1, "source_step": 0.1},
]


def default_config_dict() -> Dict[str, Any]:
    """`config --print-defaults` が出力する既定の設定文書"""
    detector = {f.name: f.default for f in fields(DetectorConfig)}
    return {
        "seed": None,
        "output_dir": "runs/default",
        "weights": "runs/default/weights.fsnt",
        "dataset": {f.name: f.default for f in fields(DatasetConfig)},
        "training": {f.name: f.default for f in fields(TrainingConfig)},
        "attacks": copy.deepcopy(DEFAULT_ATTACKS),
        "detector": detector,
    }


# ===== 文書の読み込みと上書き =====

def load_config_document(path: str) -> Dict[str, Any]:
    """JSON 設定ファイルを辞書として読む"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except FileNotFoundError:
        raise ConfigError("config", f"設定ファイルがありません: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"JSON として解釈できません: {e}")
    if not isinstance(document, dict):
        raise ConfigError("config", "設定文書はオブジェクトである必要があります")
    return document


def _parse_value(raw: str) -> Any:
    """JSON として解釈できればその値、できなければ文字列"""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    "a.b.c=value" 形式の上書きを適用した新しい文書を返す

    リストの要素は数字のキーで指定する（例: attacks.0.epsilon=0.2）
    """
    document = copy.deepcopy(document)
    for override in overrides:
        path, sep, raw = override.partition("=")
        if not sep or not path:
            raise ConfigError("--set", f"key=value 形式ではありません: {override!r}")
        keys = path.split(".")
        node: Any = document
        for depth, key in enumerate(keys):
            dotted = ".".join(keys[:depth + 1])
            last = depth == len(keys) - 1
            if isinstance(node, list):
                if not key.isdigit() or int(key) >= len(node):
                    raise ConfigError(dotted, "リストの添字が範囲外です")
                key = int(key)
            elif not isinstance(node, dict):
                raise ConfigError(dotted, "オブジェクトでもリストでもない値の下は指定できません")
            if last:
                node[key] = _parse_value(raw)
            else:
                if isinstance(node, dict) and key not in node:
                    node[key] = {}
                node = node[key]
    return document


def _merge(defaults: Dict[str, Any], document: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """既定値に文書を重ねる。未知のキーはエラー（attacks は丸ごと置き換え）"""
    merged = copy.deepcopy(defaults)
    for key, value in document.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(dotted, "未知の設定項目です")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(dotted, "オブジェクトである必要があります")
            merged[key] = _merge(defaults[key], value, prefix=f"{dotted}.")
        else:
            merged[key] = value
    return merged


# ===== ExperimentConfig =====

@dataclass(frozen=True)
class ExperimentConfig:
    """検証済みの実験設定"""
    seed: int
    output_dir: str
    weights: str
    dataset: DatasetConfig
    training: TrainingConfig
    attacks: List[AttackConfig] = field(default_factory=list)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "ExperimentConfig":
        merged = _merge(default_config_dict(), document)
        seed = resolve_seed(merged.get("seed"))
        for key in ("output_dir", "weights"):
            if not isinstance(merged[key], str) or not merged[key]:
                raise ConfigError(key, "パス文字列が必要です")

        dataset = _build(DatasetConfig, merged["dataset"], "dataset")
        dataset.validate()
        training = _build(TrainingConfig, merged["training"], "training")
        training.schedule(seed)
        detector = _build(DetectorConfig, merged["detector"], "detector")
        try:
            detector.validate()
        except ConfigError as e:
            raise ConfigError(f"detector.{e.field}", e.message)

        if not isinstance(merged["attacks"], list):
            raise ConfigError("attacks", "リストである必要があります")
        attacks = []
        for index, entry in enumerate(merged["attacks"]):
            if not isinstance(entry, dict):
                raise ConfigError(f"attacks.{index}", "オブジェクトである必要があります")
            attacks.append(attack_config_from_dict(entry, default_seed=seed, path=f"attacks.{index}"))

        return cls(seed=seed, output_dir=merged["output_dir"], weights=merged["weights"],
                   dataset=dataset, training=training, attacks=attacks, detector=detector)

    @classmethod
    def load(cls, path: Optional[str], overrides: Sequence[str] = ()) -> "ExperimentConfig":
        """設定ファイル（省略時は既定値のみ）に上書きを適用して読み込む"""
        document = load_config_document(path) if path else {}
        # 上書きは既定値を含む完全な文書に対して適用する（attacks.0.epsilon などを指定できる）
        merged = _merge(default_config_dict(), document)
        return cls.from_dict(apply_overrides(merged, overrides))

    def require_dataset_files(self, splits: Sequence[str]):
        """IDX 指定時に必要なファイルの存在を確認する（splits は "train"/"test"）"""
        if self.dataset.source != "idx":
            return
        for split in splits:
            for kind in ("images", "labels"):
                name = f"{split}_{kind}"
                path = getattr(self.dataset, name)
                if not path:
                    raise ConfigError(f"dataset.{name}", "IDX ファイルのパスが必要です")
                if not os.path.exists(path):
                    raise ConfigError(f"dataset.{name}", f"ファイルがありません: {path}")

    def require_weights(self):
        if not os.path.exists(self.weights):
            raise ConfigError("weights", f"重みファイルがありません: {self.weights}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "weights": self.weights,
            "dataset": {f.name: getattr(self.dataset, f.name) for f in fields(self.dataset)},
            "training": {f.name: getattr(self.training, f.name) for f in fields(self.training)},
            "attacks": [attack.to_dict() for attack in self.attacks],
            "detector": self.detector.to_dict(),
        }


def _build(config_type, values: Dict[str, Any], path: str):
    try:
        return config_type(**values)
    except TypeError as e:
        raise ConfigError(path, str(e))


def resolve_seed(seed: Any) -> int:
    """文書の seed → FS_SEED → エラー の順に決める"""
    if seed is None:
        seed = UnifiedConfig.env_seed()
    if seed is None:
        raise ConfigError("seed", "シードが指定されていません（設定の seed か FS_SEED）")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed", f"整数である必要があります: {seed!r}")
    return seed
