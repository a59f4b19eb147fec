"""
ワンピクセル攻撃（差分進化）
services/one_pixel_service.py

個体は n 画素分の (row, col, チャネルごとの値) を並べたもの。
DE/rand/1 の変異のみ（交叉なし）で子を作り、親と比較して良い方を残す。
適応度は正解クラスの確率（小さいほど良い）で、集団はまとめて順伝播する。
勾配は一切使わない。
"""
from typing import List, Optional, Union

import numpy as np

from core.network import Network
from services.attack_service import (
    AttackResult,
    CountingModel,
    OnePixelConfig,
    _as_counting,
    finalize,
    prepare,
)
from utils.constants import ONE_PIXEL_STOP_PROBABILITY

_EVALUATION_BATCH = 256


class PixelDifferentialEvolution:
    """画素摂動の個体群を進化させるソルバー"""

    def __init__(self, model: CountingModel, image: np.ndarray, label: int, config: OnePixelConfig):
        self.model = model
        self.image = image
        self.label = int(label)
        self.config = config
        self.channels, self.height, self.width = image.shape
        self.rng = np.random.default_rng(config.seed)

    # ----- 個体の表現 -----

    def initial_population(self) -> np.ndarray:
        """[NP, n, 2+C] の一様乱数個体群"""
        size = (self.config.population, self.config.pixels)
        rows = self.rng.uniform(0, self.height, size=size)
        cols = self.rng.uniform(0, self.width, size=size)
        values = self.rng.uniform(0.0, 1.0, size=size + (self.channels,))
        return np.concatenate([rows[..., None], cols[..., None], values], axis=-1)

    def constrain(self, population: np.ndarray) -> np.ndarray:
        """位置は画像サイズで折り返し、値は [0,1] に切り詰める"""
        population = population.copy()
        population[..., 0] = np.mod(population[..., 0], self.height)
        population[..., 1] = np.mod(population[..., 1], self.width)
        population[..., 2:] = np.clip(population[..., 2:], 0.0, 1.0)
        return population

    def apply(self, population: np.ndarray) -> np.ndarray:
        """個体群を画像バッチ [NP,C,H,W] に変換"""
        count = len(population)
        images = np.repeat(self.image[None], count, axis=0)
        index = np.arange(count)
        for pixel in range(population.shape[1]):
            genes = population[:, pixel]
            rows = np.minimum(np.floor(genes[:, 0]).astype(np.int64), self.height - 1)
            cols = np.minimum(np.floor(genes[:, 1]).astype(np.int64), self.width - 1)
            images[index, :, rows, cols] = genes[:, 2:].astype(images.dtype)
        return images

    def fitness(self, population: np.ndarray) -> np.ndarray:
        """各個体の正解クラス確率"""
        images = self.apply(population)
        chunks = [
            self.model.forward_batch(images[start:start + _EVALUATION_BATCH]).probabilities[:, self.label]
            for start in range(0, len(images), _EVALUATION_BATCH)
        ]
        return np.concatenate(chunks).astype(np.float64)

    # ----- 進化 -----

    def _donor_indices(self) -> np.ndarray:
        """個体 i ごとに i 以外から互いに異なる3個体を選ぶ [NP, 3]"""
        size = self.config.population
        picks = np.argsort(self.rng.random((size, size - 1)), axis=1)[:, :3]
        return picks + (picks >= np.arange(size)[:, None])

    def mutate(self, population: np.ndarray) -> np.ndarray:
        """DE/rand/1: v = x_r1 + F·(x_r2 − x_r3)"""
        donors = self._donor_indices()
        base, left, right = population[donors[:, 0]], population[donors[:, 1]], population[donors[:, 2]]
        return self.constrain(base + self.config.mutation * (left - right))

    def solve(self):
        """
        世代を進めて最良個体を探す

        Returns:
            (最良個体, 実行世代数, 世代ごとの最良適応度)
        """
        population = self.constrain(self.initial_population())
        fitness = self.fitness(population)
        history: List[float] = [float(fitness.min())]
        generations = 0
        while generations < self.config.generations and fitness.min() >= ONE_PIXEL_STOP_PROBABILITY:
            trial = self.mutate(population)
            trial_fitness = self.fitness(trial)
            # 子は親以下の適応度なら置き換える
            improved = trial_fitness <= fitness
            population[improved] = trial[improved]
            fitness[improved] = trial_fitness[improved]
            generations += 1
            history.append(float(fitness.min()))
        return population[int(np.argmin(fitness))], generations, history


def one_pixel_attack(model: Union[Network, CountingModel], image: np.ndarray, label: int,
                     config: Optional[OnePixelConfig] = None) -> AttackResult:
    """
    差分進化による n 画素攻撃

    正解クラス確率が 5% を下回った時点で打ち切る。失敗は例外ではなく success=False
    """
    config = config or OnePixelConfig(seed=0)
    config.validate()
    model = _as_counting(model)
    image, trace, early = prepare(model, image, label, OnePixelConfig.name)
    if early is not None:
        return early
    solver = PixelDifferentialEvolution(model, image, label, config)
    best, generations, history = solver.solve()
    candidate = solver.apply(best[None])[0]
    return finalize(model, OnePixelConfig.name, image, candidate, label,
                    trace.probabilities[int(label)], generations, history)
