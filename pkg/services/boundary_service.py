"""
境界攻撃（決定ベースのブラックボックス攻撃）
services/boundary_service.py

一様乱数画像から敵対的な開始点を見つけ、元画像との距離を保ったまま
球面上を直交方向に動く → 元画像へ縮める、というランダムウォークで距離を詰める。
予測ラベルしか見ないため勾配呼び出しは 0 回。
"""
from typing import List, Optional, Union

import numpy as np

from core.exceptions import InitializationError
from core.network import Network
from services.attack_service import (
    AttackResult,
    BoundaryConfig,
    CountingModel,
    _as_counting,
    finalize,
    prepare,
)
from utils.advanced_logging import logger
from utils.constants import BOUNDARY_ADAPTATION_INTERVAL

_MAX_SOURCE_STEP = 0.5


def _is_adversarial(model: CountingModel, image: np.ndarray, label: int) -> bool:
    return int(np.argmax(model.forward(image).probabilities)) != label


def find_starting_point(model: CountingModel, image: np.ndarray, label: int, config: BoundaryConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """
    一様乱数画像を棄却サンプリングし、見つかれば元画像方向への二分探索で近づける

    Raises:
        InitializationError: init_tries 回以内に敵対的な画像が見つからない
    """
    start = None
    for _ in range(config.init_tries):
        noise = rng.uniform(0.0, 1.0, size=image.shape).astype(image.dtype)
        if _is_adversarial(model, noise, label):
            start = noise
            break
    if start is None:
        raise InitializationError(f"{config.init_tries} 回の試行で敵対的な初期画像が見つかりません")

    # blend(α) = (1−α)·original + α·start、α=1 は敵対的
    low, high = 0.0, 1.0
    for _ in range(config.blend_steps):
        middle = (low + high) / 2.0
        blended = ((1.0 - middle) * image + middle * start).astype(image.dtype)
        if _is_adversarial(model, blended, label):
            high = middle
        else:
            low = middle
    if high < 1.0:
        return np.clip((1.0 - high) * image + high * start, 0.0, 1.0).astype(image.dtype)
    return start


def _adapt(step: float, rate: float, factor: float) -> float:
    """成功率 50% を目標に係数を増減する"""
    return step * factor if rate > 0.5 else step / factor


def boundary_attack(model: Union[Network, CountingModel], image: np.ndarray, label: int,
                    config: Optional[BoundaryConfig] = None) -> AttackResult:
    """
    境界攻撃

    1ステップ:
        1. 現在距離 d に対し、元画像方向と直交するノルム δ·d のガウス摂動を加える
        2. 元画像を中心とする半径 d の球面へ射影する
        3. 元画像へ向けて係数 ε だけ縮め、[0,1] に切り詰める
    敵対的なまま距離が真に縮んだ場合のみ採用する。10 ステップごとに
    直交ステップの成功率で δ を、縮小ステップの成功率で ε を調整する。
    history には各ステップ後の距離を記録する
    """
    config = config or BoundaryConfig(seed=0)
    config.validate()
    model = _as_counting(model)
    image, trace, early = prepare(model, image, label, BoundaryConfig.name)
    if early is not None:
        return early
    label = int(label)
    rng = np.random.default_rng(config.seed)
    original = image.astype(np.float64)

    current = find_starting_point(model, image, label, config, rng).astype(np.float64)
    distance = float(np.linalg.norm(current - original))
    delta, epsilon = config.orthogonal_step, config.source_step
    orthogonal_stats: List[bool] = []
    source_stats: List[bool] = []
    history: List[float] = [distance]

    steps = 0
    while steps < config.max_steps and distance > 0.0:
        steps += 1
        source = original - current
        unit = source / distance
        perturbation = rng.standard_normal(image.shape)
        perturbation -= np.vdot(perturbation, unit) * unit
        perturbation *= delta * distance / np.linalg.norm(perturbation)

        spherical = current + perturbation
        offset = spherical - original
        spherical = original + offset * (distance / np.linalg.norm(offset))
        spherical_image = np.clip(spherical, 0.0, 1.0).astype(image.dtype)
        orthogonal_ok = _is_adversarial(model, spherical_image, label)
        orthogonal_stats.append(orthogonal_ok)

        if orthogonal_ok:
            candidate = np.clip(original + (spherical - original) * (1.0 - epsilon), 0.0, 1.0)
            candidate_image = candidate.astype(image.dtype)
            source_ok = _is_adversarial(model, candidate_image, label)
            source_stats.append(source_ok)
            new_distance = float(np.linalg.norm(candidate_image.astype(np.float64) - original))
            if source_ok and new_distance < distance:
                current, distance = candidate_image.astype(np.float64), new_distance
        history.append(distance)

        if steps % BOUNDARY_ADAPTATION_INTERVAL == 0:
            if orthogonal_stats:
                delta = _adapt(delta, float(np.mean(orthogonal_stats)), config.adaptation)
            if source_stats:
                epsilon = min(_adapt(epsilon, float(np.mean(source_stats)), config.adaptation),
                              _MAX_SOURCE_STEP)
            orthogonal_stats.clear()
            source_stats.clear()

    logger.debug("Boundary attack finished", component="attack", attack=BoundaryConfig.name,
                 steps=steps, distance=distance, orthogonal_step=delta, source_step=epsilon)
    return finalize(model, BoundaryConfig.name, image, current.astype(image.dtype), label,
                    trace.probabilities[label], steps, history)
