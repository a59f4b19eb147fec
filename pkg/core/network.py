"""
CNN 分類器 C(·; θ)
core/network.py

固定の層語彙（conv / relu / maxpool / flatten / dense / softmax）で構成される
ネットワークの定義・パラメータ・順伝播トレース・逆伝播を扱う。
forward / input_gradient / logit_gradient は (spec, params) に対して純粋で、
複数スレッドから同時に呼び出してよい。
"""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core import tensor_ops
from core.exceptions import ArgumentError, NumericError, ShapeError


# ===== 層定義 =====

@dataclass(frozen=True)
class ConvLayer:
    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind = "conv"

    def to_text(self) -> str:
        return (f"conv filters={self.filters} kernel={self.kernel} "
                f"stride={self.stride} padding={self.padding}")


@dataclass(frozen=True)
class ReluLayer:
    kind = "relu"

    def to_text(self) -> str:
        return "relu"


@dataclass(frozen=True)
class MaxPoolLayer:
    window: int
    stride: int
    kind = "maxpool"

    def to_text(self) -> str:
        return f"maxpool window={self.window} stride={self.stride}"


@dataclass(frozen=True)
class FlattenLayer:
    kind = "flatten"

    def to_text(self) -> str:
        return "flatten"


@dataclass(frozen=True)
class DenseLayer:
    units: int
    kind = "dense"

    def to_text(self) -> str:
        return f"dense units={self.units}"


@dataclass(frozen=True)
class SoftmaxLayer:
    kind = "softmax"

    def to_text(self) -> str:
        return "softmax"


LayerSpec = Union[ConvLayer, ReluLayer, MaxPoolLayer, FlattenLayer, DenseLayer, SoftmaxLayer]

_LAYER_TYPES = {
    "conv": ConvLayer,
    "relu": ReluLayer,
    "maxpool": MaxPoolLayer,
    "flatten": FlattenLayer,
    "dense": DenseLayer,
    "softmax": SoftmaxLayer,
}


@dataclass(frozen=True)
class NetworkSpec:
    """層ごとの CNN 記述。生成時に形状の連鎖を検証する"""
    input_shape: Tuple[int, int, int]
    num_classes: int
    layers: Tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.output_shapes()

    def output_shapes(self) -> List[Tuple[int, ...]]:
        """各層の出力形状（単一サンプル）。不整合なら ShapeError"""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input_shape は正の [C,H,W] である必要があります: {self.input_shape}")
        if self.num_classes < 2:
            raise ShapeError(f"num_classes は 2 以上: {self.num_classes}")
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ShapeError("最後の層は softmax である必要があります")
        kinds = [layer.kind for layer in self.layers]
        if kinds.count("softmax") != 1:
            raise ShapeError("softmax 層はちょうど1つ必要です")
        if "conv" not in kinds or "maxpool" not in kinds:
            raise ShapeError("conv 層と maxpool 層がそれぞれ1つ以上必要です")

        shape: Tuple[int, ...] = self.input_shape
        shapes = []
        for index, layer in enumerate(self.layers):
            name = self.layer_name(index)
            if layer.kind in ("conv", "maxpool") and len(shape) != 3:
                raise ShapeError(f"{name}: [C,H,W] 入力が必要ですが {shape} です")
            if layer.kind == "conv":
                if min(layer.filters, layer.kernel, layer.stride) < 1 or layer.padding < 0:
                    raise ShapeError(f"{name}: 不正な conv パラメータ {layer}")
                _, height, width = shape
                if layer.kernel > height + 2 * layer.padding or layer.kernel > width + 2 * layer.padding:
                    raise ShapeError(f"{name}: カーネル {layer.kernel} が入力 {shape} より大きい")
                shape = (layer.filters,
                         (height + 2 * layer.padding - layer.kernel) // layer.stride + 1,
                         (width + 2 * layer.padding - layer.kernel) // layer.stride + 1)
            elif layer.kind == "maxpool":
                if layer.window < 1 or layer.stride < 1:
                    raise ShapeError(f"{name}: 不正な maxpool パラメータ {layer}")
                channels, height, width = shape
                if layer.window > height or layer.window > width:
                    raise ShapeError(f"{name}: 窓 {layer.window} が入力 {shape} より大きい")
                shape = (channels,
                         (height - layer.window) // layer.stride + 1,
                         (width - layer.window) // layer.stride + 1)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"{name}: dense の前に flatten が必要です（入力 {shape}）")
                if layer.units < 1:
                    raise ShapeError(f"{name}: units は 1 以上")
                shape = (layer.units,)
            elif layer.kind == "softmax":
                if shape != (self.num_classes,):
                    raise ShapeError(
                        f"{name}: softmax の入力 {shape} がクラス数 {self.num_classes} と一致しません"
                    )
            shapes.append(shape)
        return shapes

    @staticmethod
    def layer_name(index: int) -> str:
        return f"layer{index}"

    @property
    def softmax_index(self) -> int:
        return len(self.layers) - 1

    @property
    def last_conv_index(self) -> Optional[int]:
        convs = [i for i, layer in enumerate(self.layers) if layer.kind == "conv"]
        return convs[-1] if convs else None

    def feature_seed_index(self) -> Optional[int]:
        """最後の conv 層の ReLU 後の活性を持つ層インデックス（ReLU がなければ conv 自身）"""
        index = self.last_conv_index
        if index is None:
            return None
        following = index + 1
        if following < len(self.layers) and self.layers[following].kind == "relu":
            return following
        return index

    def to_text(self) -> str:
        """重みファイルに埋め込む正規テキスト表現"""
        lines = [
            "input {} {} {}".format(*self.input_shape),
            f"classes {self.num_classes}",
        ]
        lines.extend(layer.to_text() for layer in self.layers)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        """to_text の逆変換"""
        input_shape = None
        num_classes = None
        layers = []
        for raw in text.splitlines():
            tokens = raw.split()
            if not tokens:
                continue
            head, args = tokens[0], tokens[1:]
            if head == "input":
                input_shape = tuple(int(v) for v in args)
            elif head == "classes":
                num_classes = int(args[0])
            elif head in _LAYER_TYPES:
                kwargs = {}
                for token in args:
                    key, _, value = token.partition("=")
                    kwargs[key] = int(value)
                layers.append(_LAYER_TYPES[head](**kwargs))
            else:
                raise ArgumentError(f"未知の層記述: {raw!r}")
        if input_shape is None or num_classes is None:
            raise ArgumentError("input / classes 行が必要です")
        return cls(input_shape=input_shape, num_classes=num_classes, layers=tuple(layers))


def reference_spec(input_shape: Tuple[int, int, int] = (1, 28, 28), num_classes: int = 10) -> NetworkSpec:
    """デスクスケール実験の基準アーキテクチャ（第1層 3x3 はエントロピーのパッチサイズと一致）"""
    return NetworkSpec(
        input_shape=input_shape,
        num_classes=num_classes,
        layers=(
            ConvLayer(filters=8, kernel=3, stride=1, padding=1),
            ReluLayer(),
            MaxPoolLayer(window=2, stride=2),
            ConvLayer(filters=16, kernel=3, stride=1, padding=1),
            ReluLayer(),
            MaxPoolLayer(window=2, stride=2),
            FlattenLayer(),
            DenseLayer(units=num_classes),
            SoftmaxLayer(),
        ),
    )


# ===== パラメータ =====

@dataclass
class Parameters:
    """学習可能パラメータ θ（名前 → テンソル、挿入順を保持）"""
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> List[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "Parameters":
        return Parameters({name: value.copy() for name, value in self.tensors.items()})

    def astype(self, dtype) -> "Parameters":
        return Parameters({name: value.astype(dtype) for name, value in self.tensors.items()})

    @staticmethod
    def expected_shapes(spec: NetworkSpec) -> Dict[str, Tuple[int, ...]]:
        """ネットワーク定義から期待されるパラメータ名と形状"""
        shapes = {}
        in_shapes = [spec.input_shape] + spec.output_shapes()[:-1]
        for index, layer in enumerate(spec.layers):
            name = spec.layer_name(index)
            if layer.kind == "conv":
                channels = in_shapes[index][0]
                shapes[f"{name}.kernels"] = (layer.filters, channels, layer.kernel, layer.kernel)
                shapes[f"{name}.bias"] = (layer.filters,)
            elif layer.kind == "dense":
                shapes[f"{name}.weights"] = (layer.units, in_shapes[index][0])
                shapes[f"{name}.bias"] = (layer.units,)
        return shapes

    def validate(self, spec: NetworkSpec):
        """形状と有限性を検証"""
        expected = self.expected_shapes(spec)
        if set(expected) != set(self.tensors):
            raise ShapeError(
                f"パラメータ名がネットワーク定義と一致しません: 期待 {sorted(expected)}, 実際 {sorted(self.tensors)}"
            )
        for name, shape in expected.items():
            value = self.tensors[name]
            if value.shape != shape:
                raise ShapeError(f"{name}: 形状 {value.shape} が期待値 {shape} と一致しません")
            if not np.all(np.isfinite(value)):
                raise NumericError("パラメータに NaN/Inf が含まれています", layer=name)

    @classmethod
    def zeros(cls, spec: NetworkSpec, dtype=np.float32) -> "Parameters":
        return cls({name: np.zeros(shape, dtype=dtype)
                    for name, shape in cls.expected_shapes(spec).items()})

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int, dtype=np.float32) -> "Parameters":
        """
        Glorot 一様初期化 ±sqrt(6/(fan_in+fan_out))、バイアスはゼロ

        Args:
            spec: ネットワーク定義
            seed: 乱数シード（同じシードなら同じ値）
        """
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in cls.expected_shapes(spec).items():
            if name.endswith(".bias"):
                tensors[name] = np.zeros(shape, dtype=dtype)
                continue
            if len(shape) == 4:
                receptive = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
            else:
                fan_in, fan_out = shape[1], shape[0]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        return cls(tensors)


# ===== 順伝播トレース =====

@dataclass
class ForwardTrace:
    """
    順伝播の全記録。inputs[i] は層 i の入力（活性化前）、outputs[i] は出力（活性化後）。
    batched=True なら全テンソルが先頭にバッチ軸を持つ
    """
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    switches: Dict[int, np.ndarray]
    logits: np.ndarray
    probabilities: np.ndarray
    batched: bool = False

    @property
    def image(self) -> np.ndarray:
        return self.inputs[0]

    @property
    def predicted(self):
        return self.probabilities.argmax(axis=-1)


# ===== ネットワーク =====

class Network:
    """(spec, params) を束ねた分類器"""

    def __init__(self, spec: NetworkSpec, params: Parameters):
        params.validate(spec)
        self.spec = spec
        self.params = params
        self.dtype = next(iter(params.tensors.values())).dtype if params.tensors else np.float32

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return self.spec.input_shape

    def _check_image(self, image: np.ndarray, batched: bool) -> np.ndarray:
        image = np.asarray(image, dtype=self.dtype)
        expected = self.spec.input_shape
        actual = image.shape[1:] if batched else image.shape
        if (batched and image.ndim != 4) or tuple(actual) != expected:
            raise ShapeError(f"画像の形状 {image.shape} が入力形状 {expected} と一致しません")
        return image

    def _run(self, x: np.ndarray, batched: bool) -> ForwardTrace:
        inputs, outputs, switches = [], [], {}
        for index, layer in enumerate(self.spec.layers):
            name = self.spec.layer_name(index)
            inputs.append(x)
            if layer.kind == "conv":
                x = tensor_ops.conv2d_forward(
                    x, self.params[f"{name}.kernels"], self.params[f"{name}.bias"],
                    stride=layer.stride, padding=layer.padding,
                )
            elif layer.kind == "relu":
                x = tensor_ops.relu_forward(x)
            elif layer.kind == "maxpool":
                x, switches[index] = tensor_ops.maxpool_forward(x, layer.window, layer.stride)
            elif layer.kind == "flatten":
                x = x.reshape(x.shape[0], -1) if batched else x.reshape(-1)
            elif layer.kind == "dense":
                x = tensor_ops.dense_forward(x, self.params[f"{name}.weights"], self.params[f"{name}.bias"])
            elif layer.kind == "softmax":
                x = tensor_ops.softmax(x)
            if not np.all(np.isfinite(x)):
                raise NumericError("活性に NaN/Inf が発生しました", layer=f"{name}:{layer.kind}")
            outputs.append(x)
        return ForwardTrace(
            inputs=inputs,
            outputs=outputs,
            switches=switches,
            logits=inputs[self.spec.softmax_index],
            probabilities=outputs[self.spec.softmax_index],
            batched=batched,
        )

    def forward(self, image: np.ndarray) -> ForwardTrace:
        """単一画像 [C,H,W] の順伝播"""
        return self._run(self._check_image(image, batched=False), batched=False)

    def forward_batch(self, images: np.ndarray) -> ForwardTrace:
        """バッチ [N,C,H,W] の順伝播"""
        return self._run(self._check_image(images, batched=True), batched=True)

    def predict_probabilities(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """バッチを分割して確率のみを返す"""
        images = np.asarray(images)
        chunks = [
            self.forward_batch(images[start:start + batch_size]).probabilities
            for start in range(0, len(images), batch_size)
        ]
        if not chunks:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return np.concatenate(chunks, axis=0)

    def backward(self, trace: ForwardTrace, grad: np.ndarray, start_layer: Optional[int] = None,
                 guided: bool = False, parameter_grads: bool = False
                 ) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """
        層 start_layer の出力に対する勾配 grad を入力まで逆伝播する

        Args:
            trace: 対応する順伝播トレース
            grad: 層 start_layer の出力と同じ形状の勾配
            start_layer: 既定はロジットを出力する層（softmax の直前）
            guided: True なら ReLU で guided ゲートを使う
            parameter_grads: True ならパラメータ勾配も集める

        Returns:
            (入力勾配, パラメータ勾配の辞書)
        """
        if start_layer is None:
            start_layer = self.spec.softmax_index - 1
        if grad.shape != trace.outputs[start_layer].shape:
            raise ShapeError(
                f"勾配の形状 {grad.shape} が層 {start_layer} の出力 {trace.outputs[start_layer].shape} と一致しません"
            )
        grads: Dict[str, np.ndarray] = {}
        relu_backward = tensor_ops.guided_relu_backward if guided else tensor_ops.relu_backward
        for index in range(start_layer, -1, -1):
            layer = self.spec.layers[index]
            name = self.spec.layer_name(index)
            x = trace.inputs[index]
            if layer.kind == "conv":
                grad, grad_k, grad_b = tensor_ops.conv2d_backward(
                    grad, x, self.params[f"{name}.kernels"], stride=layer.stride, padding=layer.padding
                )
                if parameter_grads:
                    grads[f"{name}.kernels"], grads[f"{name}.bias"] = grad_k, grad_b
            elif layer.kind == "relu":
                grad = relu_backward(grad, x)
            elif layer.kind == "maxpool":
                grad = tensor_ops.maxpool_backward(grad, trace.switches[index], x.shape)
            elif layer.kind == "flatten":
                grad = grad.reshape(x.shape)
            elif layer.kind == "dense":
                grad, grad_w, grad_b = tensor_ops.dense_backward(grad, x, self.params[f"{name}.weights"])
                if parameter_grads:
                    grads[f"{name}.weights"], grads[f"{name}.bias"] = grad_w, grad_b
            elif layer.kind == "softmax":
                raise ArgumentError("softmax 層は逆伝播の対象外です（ロジット勾配から開始してください）")
        return grad, grads

    def _check_class(self, label: int):
        if not 0 <= int(label) < self.num_classes:
            raise ArgumentError(f"クラス {label} が範囲 [0, {self.num_classes}) の外です")

    def input_gradient(self, image: np.ndarray, label: int,
                       trace: Optional[ForwardTrace] = None) -> np.ndarray:
        """∇_I J(θ, I, ℓ)：交差エントロピー損失の入力画素勾配"""
        self._check_class(label)
        trace = trace or self.forward(image)
        grad_logits = tensor_ops.loss_gradient(trace.logits, int(label))
        grad, _ = self.backward(trace, grad_logits)
        return grad

    def logit_gradient(self, image: np.ndarray, class_k: int,
                       trace: Optional[ForwardTrace] = None) -> np.ndarray:
        """生ロジット z_k の入力画素勾配"""
        self._check_class(class_k)
        trace = trace or self.forward(image)
        grad_logits = tensor_ops.one_hot(int(class_k), self.num_classes, dtype=trace.logits.dtype)
        grad, _ = self.backward(trace, grad_logits)
        return grad

    def confidence_gradient(self, image: np.ndarray, label: int,
                            trace: Optional[ForwardTrace] = None) -> np.ndarray:
        """クラス確率 p_ℓ の入力画素勾配（∂p_ℓ/∂z = p_ℓ(onehot_ℓ − p)）"""
        self._check_class(label)
        trace = trace or self.forward(image)
        probs = trace.probabilities
        onehot = tensor_ops.one_hot(int(label), self.num_classes, dtype=probs.dtype)
        grad, _ = self.backward(trace, probs[int(label)] * (onehot - probs))
        return grad

    def parameter_gradients(self, images: np.ndarray, labels: Sequence[int]
                            ) -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
        """
        ミニバッチの平均交差エントロピーとパラメータ勾配

        Returns:
            (平均損失, パラメータ勾配, 確率 [N,K])
        """
        labels = np.asarray(labels, dtype=np.int64)
        trace = self.forward_batch(images)
        losses = tensor_ops.cross_entropy_from_logits(trace.logits, labels)
        grad_logits = tensor_ops.loss_gradient(trace.logits, labels) / len(labels)
        _, grads = self.backward(trace, grad_logits.astype(trace.logits.dtype), parameter_grads=True)
        return float(np.mean(losses)), grads, trace.probabilities


def iter_batches(count: int, batch_size: int, order: Optional[Iterable[int]] = None):
    """インデックス列をバッチ単位に区切る"""
    indices = np.arange(count) if order is None else np.asarray(list(order))
    for start in range(0, count, batch_size):
        yield indices[start:start + batch_size]
