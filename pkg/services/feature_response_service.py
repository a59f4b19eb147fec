"""
特徴応答サービス
services/feature_response_service.py

最後の畳み込み層の ReLU 後の活性そのものを逆伝播の種にし、
guided backpropagation で入力画素空間の特徴応答を求める。
"""
from typing import Optional

import numpy as np

from core.exceptions import UnsupportedArchitectureError
from core.network import ForwardTrace, Network
from utils.netpbm import save_image


def _seeded_backward(network: Network, image: np.ndarray, guided: bool,
                     trace: Optional[ForwardTrace]) -> np.ndarray:
    seed_index = network.spec.feature_seed_index()
    if seed_index is None:
        raise UnsupportedArchitectureError("畳み込み層がないため特徴応答を計算できません")
    trace = trace or network.forward(image)
    activations = trace.outputs[seed_index]
    response, _ = network.backward(trace, activations.copy(), start_layer=seed_index, guided=guided)
    return response


def guided_backprop(network: Network, image: np.ndarray,
                    trace: Optional[ForwardTrace] = None) -> np.ndarray:
    """
    guided backpropagation による特徴応答（入力と同じ形状、符号付き）

    ReLU では順伝播の入力が正 かつ 逆伝播信号が正 の位置だけを通す。
    最後の畳み込み層より上の全結合層・softmax は通らない
    """
    return _seeded_backward(network, image, guided=True, trace=trace)


def plain_backprop(network: Network, image: np.ndarray,
                   trace: Optional[ForwardTrace] = None) -> np.ndarray:
    """ゲートなしの通常の逆伝播（guided との比較用）"""
    return _seeded_backward(network, image, guided=False, trace=trace)


def to_grayscale(response: np.ndarray) -> np.ndarray:
    """
    チャネル方向の |r| の平均を最大値で割った [H,W] マップ

    全て 0 の応答は 0 のまま返す
    """
    response = np.asarray(response)
    gray = np.abs(response).mean(axis=0) if response.ndim == 3 else np.abs(response)
    peak = gray.max() if gray.size else 0
    if peak == 0:
        return np.zeros_like(gray)
    return np.clip(gray / peak, 0.0, 1.0)


def save_grayscale(gray: np.ndarray, path: str):
    """グレースケールマップを P5 PGM（round(255·g)）で保存"""
    save_image(gray[None], path)


def save_response_channels(response: np.ndarray, path_prefix: str):
    """チャネルごとに |r|/max|r| を PGM で保存する（<prefix>_c{i}.pgm）"""
    for channel, values in enumerate(np.asarray(response)):
        save_grayscale(to_grayscale(values), f"{path_prefix}_c{channel}.pgm")
