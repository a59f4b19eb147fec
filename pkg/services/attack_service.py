"""
敵対的摂動サービス
services/attack_service.py

共通の攻撃契約（AttackResult / 呼び出し回数の計測 / 結果の確定処理）と、
勾配ベースの攻撃 FGSM・勾配攻撃・DeepFool、攻撃名からの実行ディスパッチ。
ブラックボックス攻撃は one_pixel_service / boundary_service にある。
"""
from dataclasses import dataclass, field, fields, asdict
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.exceptions import (
    ArgumentError,
    ConfigError,
    DegenerateGeometryError,
    DegenerateGradientError,
)
from core.network import ForwardTrace, Network
from utils.advanced_logging import logger
from utils.constants import DEEPFOOL_MIN_NORM, DEEPFOOL_STEP_MARGIN


# ===== 攻撃設定 =====

@dataclass(frozen=True)
class AttackConfig:
    """攻撃設定の基底。name は攻撃名、seed は確率的な攻撃で必須"""
    name: ClassVar[str] = ""
    stochastic: ClassVar[bool] = False
    seed: Optional[int] = None

    def validate(self):
        if self.stochastic and self.seed is None:
            raise ConfigError("seed", f"{self.name} にはシードが必要です")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["name"] = self.name
        return data


@dataclass(frozen=True)
class FgsmConfig(AttackConfig):
    name: ClassVar[str] = "fgsm"
    epsilon: float = 0.1
    epsilons: Optional[Tuple[float, ...]] = None

    def validate(self):
        super().validate()
        for eps in (self.epsilons or (self.epsilon,)):
            if not 0.0 <= eps <= 1.0:
                raise ConfigError("epsilon", f"0 <= epsilon <= 1 が必要: {eps}")


@dataclass(frozen=True)
class GradientConfig(AttackConfig):
    name: ClassVar[str] = "gradient"
    step_size: float = 1.0
    normalize: bool = True
    step_sizes: Optional[Tuple[float, ...]] = None

    def validate(self):
        super().validate()
        for step in (self.step_sizes or (self.step_size,)):
            if not step > 0:
                raise ConfigError("step_size", f"step_size は正の値: {step}")


@dataclass(frozen=True)
class DeepFoolConfig(AttackConfig):
    name: ClassVar[str] = "deepfool"
    max_iterations: int = 50
    overshoot: float = 0.02
    candidates: Optional[int] = None

    def validate(self):
        super().validate()
        if self.max_iterations < 1:
            raise ConfigError("max_iterations", f"1 以上が必要: {self.max_iterations}")
        if self.overshoot < 0:
            raise ConfigError("overshoot", f"0 以上が必要: {self.overshoot}")
        if self.candidates is not None and self.candidates < 1:
            raise ConfigError("candidates", f"1 以上が必要: {self.candidates}")


@dataclass(frozen=True)
class OnePixelConfig(AttackConfig):
    name: ClassVar[str] = "one_pixel"
    stochastic: ClassVar[bool] = True
    pixels: int = 1
    population: int = 200
    mutation: float = 0.5
    generations: int = 100

    def validate(self):
        super().validate()
        if self.pixels < 1:
            raise ConfigError("pixels", f"1 以上が必要: {self.pixels}")
        if self.population < 4:
            raise ConfigError("population", f"DE/rand/1 には 4 個体以上が必要: {self.population}")
        if not self.mutation > 0:
            raise ConfigError("mutation", f"正の値が必要: {self.mutation}")
        if self.generations < 1:
            raise ConfigError("generations", f"1 以上が必要: {self.generations}")


@dataclass(frozen=True)
class BoundaryConfig(AttackConfig):
    name: ClassVar[str] = "boundary"
    stochastic: ClassVar[bool] = True
    max_steps: int = 1000
    orthogonal_step: float = 0.1
    source_step: float = 0.1
    adaptation: float = 1.5
    init_tries: int = 100
    blend_steps: int = 10

    def validate(self):
        super().validate()
        if self.max_steps < 1 or self.init_tries < 1 or self.blend_steps < 0:
            raise ConfigError("max_steps", "max_steps / init_tries は 1 以上、blend_steps は 0 以上")
        if not self.orthogonal_step > 0:
            raise ConfigError("orthogonal_step", f"正の値が必要: {self.orthogonal_step}")
        if not 0 < self.source_step < 1:
            raise ConfigError("source_step", f"(0, 1) の範囲: {self.source_step}")
        if not self.adaptation > 1:
            raise ConfigError("adaptation", f"1 より大きい値が必要: {self.adaptation}")


ATTACK_CONFIGS = {
    config_type.name: config_type
    for config_type in (FgsmConfig, GradientConfig, DeepFoolConfig, OnePixelConfig, BoundaryConfig)
}


def attack_config_from_dict(data: Dict[str, Any], default_seed: Optional[int] = None,
                            path: str = "attack") -> AttackConfig:
    """
    JSON の辞書から攻撃設定を作る

    Args:
        data: {"name": ..., 各パラメータ}
        default_seed: seed 未指定時に使う値
        path: エラーメッセージ用のフィールドパス
    """
    data = dict(data)
    name = data.pop("name", None)
    if name not in ATTACK_CONFIGS:
        raise ConfigError(f"{path}.name", f"未知の攻撃 {name!r}（{', '.join(ATTACK_CONFIGS)}）")
    config_type = ATTACK_CONFIGS[name]
    known = {f.name for f in fields(config_type)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", f"{name} に存在しないパラメータです")
    for key in ("epsilons", "step_sizes"):
        if data.get(key) is not None:
            data[key] = tuple(float(v) for v in data[key])
    if data.get("seed") is None:
        data["seed"] = default_seed
    try:
        config = config_type(**data)
    except TypeError as e:
        raise ConfigError(path, str(e))
    try:
        config.validate()
    except ConfigError as e:
        raise ConfigError(f"{path}.{e.field}", e.message)
    return config


# ===== 呼び出し回数の計測 =====

class CountingModel:
    """
    Network をラップして順伝播・勾配の呼び出し回数を数える

    forward_batch は画像枚数分の順伝播として数える
    """

    def __init__(self, network: Network):
        self.network = network
        self.forward_calls = 0
        self.gradient_calls = 0

    @property
    def num_classes(self) -> int:
        return self.network.num_classes

    @property
    def dtype(self):
        return self.network.dtype

    def forward(self, image: np.ndarray) -> ForwardTrace:
        self.forward_calls += 1
        return self.network.forward(image)

    def forward_batch(self, images: np.ndarray) -> ForwardTrace:
        self.forward_calls += len(images)
        return self.network.forward_batch(images)

    def input_gradient(self, image, label, trace=None) -> np.ndarray:
        self.gradient_calls += 1
        return self.network.input_gradient(image, label, trace=trace)

    def logit_gradient(self, image, class_k, trace=None) -> np.ndarray:
        self.gradient_calls += 1
        return self.network.logit_gradient(image, class_k, trace=trace)

    def confidence_gradient(self, image, label, trace=None) -> np.ndarray:
        self.gradient_calls += 1
        return self.network.confidence_gradient(image, label, trace=trace)


def _as_counting(model: Union[Network, CountingModel]) -> CountingModel:
    return model if isinstance(model, CountingModel) else CountingModel(model)


# ===== 攻撃結果 =====

@dataclass
class AttackResult:
    """
    1回の攻撃の結果

    adversarial == clip(original + perturbation, 0, 1) が常に成り立ち、
    success は adversarial の新たな順伝播から判定される
    """
    attack: str
    original: np.ndarray
    perturbation: np.ndarray
    adversarial: np.ndarray
    success: bool
    label: int
    predicted: int
    confidence_before: float
    confidence_after: float
    target_confidence: float
    l2_norm: float
    linf_norm: float
    iterations: int
    forward_calls: int
    gradient_calls: int
    pre_misclassified: bool = False
    history: List[float] = field(default_factory=list)

    def summary(self) -> Dict[str, Any]:
        """CSV 行・ログ用のスカラー値のみの辞書"""
        return {
            "attack": self.attack,
            "success": self.success,
            "label": self.label,
            "predicted": self.predicted,
            "confidence_before": self.confidence_before,
            "confidence_after": self.confidence_after,
            "target_confidence": self.target_confidence,
            "l2_norm": self.l2_norm,
            "linf_norm": self.linf_norm,
            "iterations": self.iterations,
            "forward_calls": self.forward_calls,
            "gradient_calls": self.gradient_calls,
            "pre_misclassified": self.pre_misclassified,
        }


def perturbation_norms(perturbation: np.ndarray) -> Tuple[float, float]:
    """η の (ℓ2, ℓ∞) ノルム（float64 で計算）"""
    flat = np.asarray(perturbation, dtype=np.float64).ravel()
    if flat.size == 0:
        return 0.0, 0.0
    return float(np.linalg.norm(flat)), float(np.max(np.abs(flat)))


def finalize(model: CountingModel, attack: str, original: np.ndarray, candidate: np.ndarray, label: int,
             confidence_before: float, iterations: int, history: Optional[List[float]] = None,
             pre_misclassified: bool = False) -> AttackResult:
    """
    候補画像から AttackResult を確定する

    η = clip(candidate) − original とし、adversarial = clip(original + η) を
    改めて順伝播して成否・信頼度を決める
    """
    dtype = original.dtype
    perturbation = (np.clip(candidate, 0.0, 1.0).astype(dtype) - original).astype(dtype)
    adversarial = np.clip(original + perturbation, 0.0, 1.0).astype(dtype)
    trace = model.forward(adversarial)
    probs = trace.probabilities
    predicted = int(np.argmax(probs))
    l2_norm, linf_norm = perturbation_norms(perturbation)
    result = AttackResult(
        attack=attack,
        original=original,
        perturbation=perturbation,
        adversarial=adversarial,
        success=predicted != int(label),
        label=int(label),
        predicted=predicted,
        confidence_before=float(confidence_before),
        confidence_after=float(probs[int(label)]),
        target_confidence=float(probs[predicted]),
        l2_norm=l2_norm,
        linf_norm=linf_norm,
        iterations=int(iterations),
        forward_calls=model.forward_calls,
        gradient_calls=model.gradient_calls,
        pre_misclassified=pre_misclassified,
        history=list(history or []),
    )
    logger.log_attack_result(attack, result.success, l2_norm=l2_norm, linf_norm=linf_norm,
                             iterations=result.iterations, label=result.label, predicted=predicted)
    return result


def prepare(model: CountingModel, image: np.ndarray, label: int, attack: str
            ) -> Tuple[np.ndarray, ForwardTrace, Optional[AttackResult]]:
    """
    攻撃前の共通処理

    Returns:
        (dtype を揃えた画像, 元画像のトレース, 誤分類済みなら確定済みの結果)
    """
    label = int(label)
    if not 0 <= label < model.num_classes:
        raise ArgumentError(f"ラベル {label} が範囲 [0, {model.num_classes}) の外です")
    image = np.asarray(image, dtype=model.dtype)
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ArgumentError("画素値は [0,1] の範囲である必要があります")
    trace = model.forward(image)
    if int(np.argmax(trace.probabilities)) != label:
        confidence = float(trace.probabilities[label])
        return image, trace, finalize(model, attack, image, image, label, confidence, 0,
                                      pre_misclassified=True)
    return image, trace, None


def _search_steps(model: CountingModel, image: np.ndarray, label: int, direction: np.ndarray,
                  steps: Sequence[float]) -> Tuple[np.ndarray, int]:
    """固定方向に対して steps を順に試し、最初に予測が変わった候補を返す"""
    candidate = image
    for tried, step in enumerate(steps, start=1):
        candidate = np.clip(image + step * direction, 0.0, 1.0).astype(image.dtype)
        if len(steps) == 1:
            return candidate, tried
        if int(np.argmax(model.forward(candidate).probabilities)) != label:
            return candidate, tried
    return candidate, len(steps)


# ===== FGSM =====

def fgsm(model: Union[Network, CountingModel], image: np.ndarray, label: int,
         config: Optional[FgsmConfig] = None) -> AttackResult:
    """
    Fast Gradient Sign Method: η = ε·sign(∇_I J(θ, I, ℓ))

    勾配計算はちょうど1回。config.epsilons を与えると同じ勾配で
    昇順に ε を試し、最初に予測が変わったところで止める
    """
    config = config or FgsmConfig()
    config.validate()
    model = _as_counting(model)
    image, trace, early = prepare(model, image, label, FgsmConfig.name)
    if early is not None:
        return early
    grad = model.input_gradient(image, label, trace=trace)
    if not np.any(grad):
        raise DegenerateGradientError("入力勾配が全て 0 のため FGSM は摂動を作れません")
    direction = np.sign(grad).astype(image.dtype)
    steps = config.epsilons or (config.epsilon,)
    candidate, tried = _search_steps(model, image, int(label), direction, steps)
    return finalize(model, FgsmConfig.name, image, candidate, label,
                    trace.probabilities[int(label)], tried)


# ===== 勾配攻撃 =====

def gradient_attack(model: Union[Network, CountingModel], image: np.ndarray, label: int,
                    config: Optional[GradientConfig] = None) -> AttackResult:
    """
    正解クラス確率を1ステップで下げる: η = −step·g/‖g‖₂

    normalize=False なら η = −step·g（生勾配のステップ）
    """
    config = config or GradientConfig()
    if not config.step_size > 0:
        raise ArgumentError(f"step_size は正の値: {config.step_size}")
    config.validate()
    model = _as_counting(model)
    image, trace, early = prepare(model, image, label, GradientConfig.name)
    if early is not None:
        return early
    grad = model.confidence_gradient(image, label, trace=trace)
    norm = float(np.linalg.norm(grad.astype(np.float64)))
    if norm == 0.0:
        raise DegenerateGradientError("正解クラス確率の勾配が 0 です")
    direction = -grad / norm if config.normalize else -grad
    steps = config.step_sizes or (config.step_size,)
    candidate, tried = _search_steps(model, image, int(label), direction.astype(image.dtype), steps)
    return finalize(model, GradientConfig.name, image, candidate, label,
                    trace.probabilities[int(label)], tried)


# ===== DeepFool =====

def _candidate_classes(logits: np.ndarray, label: int, limit: Optional[int]) -> List[int]:
    order = [int(k) for k in np.argsort(-logits, kind="stable") if int(k) != label]
    return order if limit is None else order[:limit]


def deepfool(model: Union[Network, CountingModel], image: np.ndarray, label: int,
             config: Optional[DeepFoolConfig] = None) -> AttackResult:
    """
    DeepFool（ℓ2）: 最も近い線形化決定境界への射影を繰り返す

    各反復で k* = argmin |f_k|/‖w_k‖₂ を選び r = (|f_k*|+1e-4)/‖w_k*‖₂²·w_k* を求め、
    現在の反復点から x ← clip(x + (1+overshoot)·r) と進める。
    加算項により f = 0（ロジットが同点）でも r は 0 にならない。
    history には各ステップの ‖r‖₂ を記録する
    """
    config = config or DeepFoolConfig()
    config.validate()
    model = _as_counting(model)
    image, trace, early = prepare(model, image, label, DeepFoolConfig.name)
    if early is not None:
        return early
    label = int(label)
    confidence_before = trace.probabilities[label]
    classes = _candidate_classes(trace.logits, label, config.candidates)

    candidate = image
    history: List[float] = []
    iterations = 0
    while iterations < config.max_iterations and int(np.argmax(trace.probabilities)) == label:
        logits = trace.logits.astype(np.float64)
        grad_label = model.logit_gradient(candidate, label, trace=trace).astype(np.float64)
        best = None
        for k in classes:
            w = model.logit_gradient(candidate, k, trace=trace).astype(np.float64) - grad_label
            w_norm = float(np.linalg.norm(w))
            if w_norm < DEEPFOOL_MIN_NORM:
                continue
            f = logits[k] - logits[label]
            distance = abs(f) / w_norm
            if best is None or distance < best[0]:
                best = (distance, w, w_norm, f)
        if best is None:
            raise DegenerateGeometryError("全ての候補クラスで ‖w_k‖ が 0 に近く境界方向を決められません")
        _, w, w_norm, f = best
        step = ((abs(f) + DEEPFOOL_STEP_MARGIN) / w_norm ** 2) * w
        history.append(float(np.linalg.norm(step)))
        iterations += 1
        # 切り詰めで打ち消された分は次の反復の f に残る
        moved = candidate.astype(np.float64) + (1.0 + config.overshoot) * step
        candidate = np.clip(moved, 0.0, 1.0).astype(image.dtype)
        trace = model.forward(candidate)
    return finalize(model, DeepFoolConfig.name, image, candidate, label, confidence_before,
                    iterations, history)


# ===== ディスパッチ =====

def run_attack(model: Union[Network, CountingModel], image: np.ndarray, label: int,
               config: AttackConfig) -> AttackResult:
    """攻撃設定の種類に応じて攻撃を実行する"""
    from services.boundary_service import boundary_attack
    from services.one_pixel_service import one_pixel_attack

    runners = {
        FgsmConfig.name: fgsm,
        GradientConfig.name: gradient_attack,
        DeepFoolConfig.name: deepfool,
        OnePixelConfig.name: one_pixel_attack,
        BoundaryConfig.name: boundary_attack,
    }
    if config.name not in runners:
        raise ArgumentError(f"未知の攻撃設定: {type(config).__name__}")
    return runners[config.name](model, image, label, config)
