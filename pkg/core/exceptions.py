"""
例外クラス定義
core/exceptions.py

ライブラリ層は例外を送出し、CLI（core/app_router.py）だけが終了コードへ変換する
"""
from typing import Optional

from utils.constants import (
    EXIT_CONFIG_ERROR,
    EXIT_IO_ERROR,
    EXIT_NUMERIC_ERROR,
    EXIT_SUCCESS,
)


class DetectorError(Exception):
    """本プロジェクト共通の基底例外"""


class ArgumentError(DetectorError, ValueError):
    """引数が事前条件を満たさない"""


class ShapeError(ArgumentError):
    """テンソル形状の不一致"""


class ConfigError(DetectorError):
    """実験設定の不備（フィールド名をメッセージに含める）"""

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


class NumericError(DetectorError, ArithmeticError):
    """NaN/Inf の検出や学習の発散"""

    def __init__(self, message: str, layer: Optional[str] = None):
        self.layer = layer
        if layer is not None:
            message = f"[{layer}] {message}"
        super().__init__(message)


class FormatError(DetectorError):
    """ファイル形式エラー（バイトオフセット付き）"""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)


class ChecksumError(FormatError):
    """CRC-32 の不一致"""


class UnsupportedFormatError(FormatError):
    """対応していないファイル形式（ASCII版 PNM など）"""


class DegenerateGradientError(DetectorError):
    """勾配が全要素ゼロで攻撃が成立しない"""


class DegenerateGeometryError(DetectorError):
    """DeepFool で全クラスの境界法線がほぼゼロ"""


class InitializationError(DetectorError):
    """Boundary attack の初期敵対的画像が見つからない"""


class UnsupportedArchitectureError(DetectorError):
    """guided backpropagation に必要な層がない"""


class ExperimentAbortedError(DetectorError):
    """サンプル単位のエラーが多すぎて実験を中断した"""


def exit_code_for(exc: BaseException) -> int:
    """例外を CLI の終了コードへ変換する"""
    if isinstance(exc, (ConfigError, ArgumentError)):
        return EXIT_CONFIG_ERROR
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC_ERROR
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO_ERROR
    if exc is None:
        return EXIT_SUCCESS
    return EXIT_CONFIG_ERROR
