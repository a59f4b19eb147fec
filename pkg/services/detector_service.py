"""
検出サービス
services/detector_service.py

特徴応答のグレースケールマップをパッチに分け、パッチごとの局所空間エントロピー S_k と
その平均 s̄ を求める。s̄ がしきい値 τ を厳密に上回れば「攻撃あり」と判定する。

エントロピーの読み方は3通り:
    histogram    : パッチ内画素を B 段階に量子化したヒストグラム（既定）
    cooccurrence : 横に隣り合う量子化レベルの組の出現頻度
    spatial      : 画素値そのものをパッチ和で割った分布
"""
import math
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import entropy as shannon_entropy

from core.exceptions import ArgumentError, ConfigError
from core.network import Network
from services.feature_response_service import guided_backprop, to_grayscale
from utils.netpbm import save_image

ENTROPY_MODES = ("histogram", "cooccurrence", "spatial")


class Verdict(Enum):
    """判定結果"""
    CLEAN = "clean"
    ATTACKED = "attacked"


@dataclass(frozen=True)
class DetectorConfig:
    """検出器の設定"""
    patch_size: int = 3
    stride: int = 1
    mode: str = "histogram"
    bins: int = 32
    threshold: Optional[float] = None

    def validate(self):
        if self.patch_size < 2:
            raise ConfigError("patch_size", f"2 以上が必要: {self.patch_size}")
        if self.stride < 1:
            raise ConfigError("stride", f"1 以上が必要: {self.stride}")
        if self.mode not in ENTROPY_MODES:
            raise ConfigError("mode", f"{self.mode!r} は {', '.join(ENTROPY_MODES)} のいずれかである必要があります")
        if not 2 <= self.bins <= 256:
            raise ConfigError("bins", f"2 <= bins <= 256 が必要: {self.bins}")
        if self.threshold is not None and math.isnan(self.threshold):
            raise ConfigError("threshold", "NaN は使えません")

    def to_dict(self):
        return asdict(self)

    @property
    def max_entropy(self) -> float:
        """エクスポート時の正規化に使う log₂(P²)"""
        return math.log2(self.patch_size ** 2)


@dataclass(frozen=True)
class EntropyMap:
    """パッチ位置ごとのエントロピー [Kh, Kw]"""
    values: np.ndarray
    config: DetectorConfig

    @property
    def patch_count(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class DetectionScore:
    """s̄・パッチ数・判定"""
    score: float
    patch_count: int
    verdict: Verdict
    threshold: float


# ===== エントロピー =====

def _quantize(values: np.ndarray, bins: int) -> np.ndarray:
    """[0,1] を B 個の一様ビンに量子化。1.0 は最上位ビン"""
    return np.clip(np.floor(values * bins), 0, bins - 1).astype(np.int64)


def _discrete_entropy(codes: np.ndarray) -> np.ndarray:
    """
    各行の離散値の Shannon エントロピー（bit）

    H = log₂M − (1/M)·Σ_e log₂ c_e（c_e は要素 e と同じ値の個数）
    """
    size = codes.shape[-1]
    same = (codes[..., :, None] == codes[..., None, :]).sum(axis=-1)
    values = math.log2(size) - np.log2(same).mean(axis=-1)
    return np.clip(values, 0.0, math.log2(size))


def _patches(gray: np.ndarray, config: DetectorConfig) -> np.ndarray:
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ArgumentError(f"グレースケールマップは [H,W] である必要があります: shape={gray.shape}")
    size = config.patch_size
    if gray.shape[0] < size or gray.shape[1] < size:
        raise ArgumentError(f"パッチサイズ {size} が画像 {gray.shape} より大きいです")
    windows = sliding_window_view(gray, (size, size))
    return windows[::config.stride, ::config.stride]


def local_spatial_entropy(gray: np.ndarray, config: Optional[DetectorConfig] = None) -> EntropyMap:
    """
    パッチごとの局所空間エントロピー S_k

    K = (⌊(H−P)/s⌋+1)·(⌊(W−P)/s⌋+1)。0·log 0 は 0 とする。
    cooccurrence は横方向に隣接する組（距離 1・角度 0、skimage の graycomatrix と同じ）を数える
    """
    config = config or DetectorConfig()
    config.validate()
    patches = _patches(gray, config)
    rows, cols = patches.shape[:2]
    size = config.patch_size

    if config.mode == "histogram":
        codes = _quantize(patches, config.bins).reshape(rows, cols, size * size)
        values = _discrete_entropy(codes)
    elif config.mode == "cooccurrence":
        levels = _quantize(patches, config.bins)
        pairs = levels[..., :, :-1] * config.bins + levels[..., :, 1:]
        values = _discrete_entropy(pairs.reshape(rows, cols, size * (size - 1)))
    else:
        flat = patches.reshape(rows, cols, size * size)
        totals = flat.sum(axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            values = shannon_entropy(flat, base=2, axis=-1)
        values = np.where(totals > 0, values, 0.0)
    return EntropyMap(values=np.asarray(values, dtype=np.float64), config=config)


def average_entropy(entropy_map: EntropyMap) -> float:
    """s̄ = (1/K)·Σ S_k"""
    if entropy_map.patch_count == 0:
        raise ArgumentError("エントロピーマップが空です")
    return float(np.mean(entropy_map.values))


# ===== 判定 =====

def decide(score: float, threshold: float) -> Verdict:
    """s̄ > τ なら攻撃あり（等号は clean）"""
    return Verdict.ATTACKED if score > threshold else Verdict.CLEAN


def calibrate_threshold(clean_scores: Sequence[float], target_fpr: float) -> float:
    """
    clean スコアから目標偽陽性率のしきい値を決める

    τ は「τ を厳密に上回る clean スコアが target_fpr·N 個以下」となる最小のスコア
    """
    scores = np.sort(np.asarray(clean_scores, dtype=np.float64))
    if scores.size == 0:
        raise ArgumentError("clean スコアが空です")
    if not 0.0 < target_fpr < 1.0:
        raise ArgumentError(f"target_fpr は (0, 1) の範囲: {target_fpr}")
    allowed = math.floor(target_fpr * scores.size + 1e-9)
    above = scores.size - np.searchsorted(scores, scores, side="right")
    return float(scores[int(np.argmax(above <= allowed))])


# ===== 画像単位 =====

@dataclass(frozen=True)
class ImageAnalysis:
    """1枚の画像の特徴応答から判定までの中間結果"""
    response: np.ndarray
    gray: np.ndarray
    entropy_map: EntropyMap
    score: float


def analyze_image(network: Network, image: np.ndarray, config: Optional[DetectorConfig] = None) -> ImageAnalysis:
    """特徴応答 → グレースケール → エントロピーマップ → s̄"""
    config = config or DetectorConfig()
    response = guided_backprop(network, image)
    gray = to_grayscale(response)
    entropy_map = local_spatial_entropy(gray, config)
    return ImageAnalysis(response=response, gray=gray, entropy_map=entropy_map,
                         score=average_entropy(entropy_map))


def detect(network: Network, image: np.ndarray, config: DetectorConfig) -> DetectionScore:
    """設定のしきい値で1枚を判定する"""
    if config.threshold is None:
        raise ConfigError("threshold", "判定にはしきい値が必要です")
    analysis = analyze_image(network, image, config)
    return DetectionScore(
        score=analysis.score,
        patch_count=analysis.entropy_map.patch_count,
        verdict=decide(analysis.score, config.threshold),
        threshold=config.threshold,
    )


def save_entropy_map(entropy_map: EntropyMap, path: str):
    """エントロピーマップを 255/log₂(P²) でスケールして PGM 保存"""
    save_image((entropy_map.values / entropy_map.config.max_entropy)[None], path)
