"""
学習サービス
services/training_service.py

モメンタム付き SGD によるミニバッチ学習。シードとデータ順が同じなら
学習後のパラメータはビット単位で一致する。
"""
from dataclasses import dataclass, asdict
from typing import List, Optional, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from core.exceptions import ArgumentError, NumericError
from core.network import Network, NetworkSpec, Parameters, iter_batches
from services.dataset_service import Dataset
from utils.advanced_logging import logger


@dataclass(frozen=True)
class TrainingSchedule:
    """学習スケジュール（既定値は基準アーキテクチャ向け）"""
    epochs: int = 6
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 0.5
    decay_every: int = 2
    seed: int = 0
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.decay_every < 1:
            raise ArgumentError(f"epochs / batch_size / decay_every は 1 以上: {self}")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ArgumentError(f"learning_rate >= 0, 0 <= momentum < 1 が必要: {self}")
        if not 0 <= self.holdout_fraction < 1:
            raise ArgumentError(f"holdout_fraction は [0, 1) の範囲: {self.holdout_fraction}")

    def learning_rate_at(self, epoch: int) -> float:
        """epoch（0始まり）における学習率"""
        return self.learning_rate * self.lr_decay ** (epoch // self.decay_every)


@dataclass(frozen=True)
class EpochMetrics:
    """エポックごとの指標"""
    epoch: int
    learning_rate: float
    train_loss: float
    train_accuracy: float
    holdout_accuracy: float

    def to_dict(self):
        return asdict(self)


def accuracy(network: Network, dataset: Dataset) -> float:
    """データセット上の分類精度"""
    if len(dataset) == 0:
        return float("nan")
    probs = network.predict_probabilities(dataset.images)
    return float(np.mean(probs.argmax(axis=1) == dataset.labels))


def split_holdout(dataset: Dataset, schedule: TrainingSchedule) -> Tuple[Dataset, Dataset]:
    """
    層化抽出で検証用データを切り出す

    データが小さすぎて層化できない場合は学習データ自体で評価する
    """
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    holdout_size = int(round(len(dataset) * schedule.holdout_fraction))
    present = int(np.count_nonzero(counts))
    if holdout_size < present or len(dataset) - holdout_size < present or counts[counts > 0].min() < 2:
        return dataset, dataset
    train_idx, holdout_idx = train_test_split(
        np.arange(len(dataset)),
        test_size=holdout_size,
        random_state=schedule.seed,
        stratify=dataset.labels,
    )
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(holdout_idx))


def train(spec: NetworkSpec, params: Parameters, dataset: Dataset, schedule: TrainingSchedule,
          holdout: Optional[Dataset] = None) -> Tuple[Parameters, List[EpochMetrics]]:
    """
    モメンタム付き SGD でネットワークを学習する

    Args:
        spec: ネットワーク定義
        params: 初期パラメータ（変更しない）
        dataset: 学習データ
        schedule: 学習スケジュール
        holdout: 検証データ（省略時は schedule.holdout_fraction で分割）

    Returns:
        (学習後のパラメータ, エポックごとの指標)
    """
    if len(dataset) == 0:
        raise ArgumentError("学習データが空です")
    if holdout is None:
        dataset, holdout = split_holdout(dataset, schedule)

    params = params.copy()
    velocity = {name: np.zeros_like(value) for name, value in params.items()}
    rng = np.random.default_rng(schedule.seed)
    history: List[EpochMetrics] = []

    for epoch in range(schedule.epochs):
        lr = np.float32(schedule.learning_rate_at(epoch))
        momentum = np.float32(schedule.momentum)
        order = rng.permutation(len(dataset))
        loss_sum, correct = 0.0, 0
        for batch in iter_batches(len(dataset), schedule.batch_size, order):
            network = Network(spec, params)
            loss, grads, probs = network.parameter_gradients(dataset.images[batch], dataset.labels[batch])
            if not np.isfinite(loss):
                raise NumericError(f"エポック {epoch + 1} で損失が発散しました", layer="loss")
            loss_sum += loss * len(batch)
            correct += int(np.sum(probs.argmax(axis=1) == dataset.labels[batch]))
            for name, grad in grads.items():
                velocity[name] = momentum * velocity[name] + grad.astype(velocity[name].dtype)
                params[name] = params[name] - lr * velocity[name]

        network = Network(spec, params)
        metrics = EpochMetrics(
            epoch=epoch + 1,
            learning_rate=float(lr),
            train_loss=loss_sum / len(dataset),
            train_accuracy=correct / len(dataset),
            holdout_accuracy=accuracy(network, holdout),
        )
        history.append(metrics)
        logger.log_training_epoch(metrics.epoch, learning_rate=metrics.learning_rate,
                                  train_loss=metrics.train_loss,
                                  train_accuracy=metrics.train_accuracy,
                                  holdout_accuracy=metrics.holdout_accuracy)
    return params, history
