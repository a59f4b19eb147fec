"""
テスト共通フィクスチャ
tests/conftest.py
"""
import os
import sys
import tempfile

import numpy as np
import pytest

# プロジェクトルートをインポートパスに追加
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

# テスト中のログは一時ディレクトリへ
os.environ.setdefault("FS_LOG_DIR", os.path.join(tempfile.gettempdir(), "feature-response-detector-tests"))

from core.network import (  # noqa: E402
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    MaxPoolLayer,
    Network,
    NetworkSpec,
    Parameters,
    ReluLayer,
    SoftmaxLayer,
)
from services.dataset_service import synth_shapes  # noqa: E402


def make_tiny_spec(channels: int = 1, size: int = 6, num_classes: int = 3) -> NetworkSpec:
    """conv → relu → maxpool → conv → relu → flatten → dense → softmax の小さなネットワーク"""
    return NetworkSpec(
        input_shape=(channels, size, size),
        num_classes=num_classes,
        layers=(
            ConvLayer(filters=3, kernel=3, stride=1, padding=1),
            ReluLayer(),
            MaxPoolLayer(window=2, stride=2),
            ConvLayer(filters=2, kernel=2, stride=1, padding=0),
            ReluLayer(),
            FlattenLayer(),
            DenseLayer(units=num_classes),
            SoftmaxLayer(),
        ),
    )


def make_linear_network(weights: np.ndarray, bias: np.ndarray, size: int = 2,
                        relu: bool = False, conv_weight: float = 1.0, conv_bias: float = 0.0) -> Network:
    """
    1x1 恒等畳み込み + 1x1 プーリング + 全結合の、入力に対して線形（relu=False）なネットワーク

    weights: [K, size*size]
    """
    layers = [ConvLayer(filters=1, kernel=1)]
    if relu:
        layers.append(ReluLayer())
    layers += [MaxPoolLayer(window=1, stride=1), FlattenLayer(), DenseLayer(units=len(bias)), SoftmaxLayer()]
    spec = NetworkSpec(input_shape=(1, size, size), num_classes=len(bias), layers=tuple(layers))
    dense_name = spec.layer_name(len(layers) - 2)
    params = Parameters({
        "layer0.kernels": np.full((1, 1, 1, 1), conv_weight, dtype=np.float64),
        "layer0.bias": np.array([conv_bias], dtype=np.float64),
        f"{dense_name}.weights": np.asarray(weights, dtype=np.float64),
        f"{dense_name}.bias": np.asarray(bias, dtype=np.float64),
    })
    return Network(spec, params)


def make_separable_network(size: int = 6) -> Network:
    """
    明るさで2クラスに分ける単純なネットワーク

    画素平均が 0.5 より大きければクラス 1
    """
    pixels = size * size
    weights = np.stack([np.full(pixels, -4.0 / pixels), np.full(pixels, 4.0 / pixels)])
    return make_linear_network(weights, np.array([2.0, -2.0]), size=size, relu=True)


@pytest.fixture
def tiny_spec():
    return make_tiny_spec()


@pytest.fixture
def tiny_network(tiny_spec):
    return Network(tiny_spec, Parameters.initialize(tiny_spec, seed=7))


@pytest.fixture
def tiny_network64(tiny_spec):
    """有限差分チェック用の float64 版"""
    return Network(tiny_spec, Parameters.initialize(tiny_spec, seed=7).astype(np.float64))


@pytest.fixture
def separable_network():
    return make_separable_network()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    return synth_shapes(40, seed=3)
