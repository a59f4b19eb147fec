"""
テンソル演算カーネル
core/tensor_ops.py

畳み込み・ReLU・最大プーリング・全結合・softmax・交差エントロピーの
順伝播／逆伝播。全関数は入力に対して純粋で、スレッドから同時に呼び出してよい。

テンソルは numpy.ndarray で表す。画像系カーネルは [C,H,W] の単一入力と
先頭にバッチ軸を持つ [N,C,H,W] の両方を受け付け、入力の dtype を保つ
（通常は float32、勾配検証のオラクルでは float64）。
"""
from typing import Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax, softmax as _scipy_softmax

from core.exceptions import ArgumentError, ShapeError

# 最大プーリングのスイッチ：出力セルごとの「サンプル内フラット入力インデックス」(int64)
PoolSwitches = np.ndarray


def _to_batch(x: np.ndarray, name: str) -> Tuple[np.ndarray, bool]:
    """[C,H,W] を [1,C,H,W] に揃える。戻り値の bool はバッチ軸を付加したかどうか"""
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name} は [C,H,W] か [N,C,H,W] である必要があります: shape={x.shape}")


def _output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ===== 畳み込み（相互相関、カーネル反転なし） =====

def _check_conv_args(x: np.ndarray, kernels: np.ndarray, stride: int, padding: int):
    if kernels.ndim != 4:
        raise ShapeError(f"kernels は [F,C,kh,kw] である必要があります: shape={kernels.shape}")
    if stride < 1:
        raise ArgumentError(f"stride は 1 以上: {stride}")
    if padding < 0:
        raise ArgumentError(f"padding は 0 以上: {padding}")
    _, channels, height, width = x.shape
    filters, k_channels, kh, kw = kernels.shape
    if k_channels != channels:
        raise ShapeError(
            f"入力チャネル数 {channels} とカーネルのチャネル数 {k_channels} が一致しません"
        )
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise ShapeError(
            f"カーネル {kh}x{kw} がパディング後の入力 "
            f"{height + 2 * padding}x{width + 2 * padding} より大きい"
        )


def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """[N,C,H',W',kh,kw] の読み取り専用ビュー（im2col 相当）"""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def conv2d_forward(input: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
                   stride: int = 1, padding: int = 0) -> np.ndarray:
    """
    2次元畳み込みの順伝播

    Args:
        input: [C,H,W] または [N,C,H,W]
        kernels: [F,C,kh,kw]
        bias: [F]
        stride: ストライド（1以上）
        padding: ゼロパディング幅

    Returns:
        np.ndarray: [F,H',W'] または [N,F,H',W']
    """
    x, added = _to_batch(input, "input")
    _check_conv_args(x, kernels, stride, padding)
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"bias は [{kernels.shape[0]}] である必要があります: shape={bias.shape}")
    kh, kw = kernels.shape[2:]
    windows = _conv_windows(x, kh, kw, stride, padding)
    out = np.einsum('nchwij,fcij->nfhw', windows, kernels, optimize=True)
    out = out + bias[np.newaxis, :, np.newaxis, np.newaxis]
    return out[0] if added else out


def conv2d_backward(grad_out: np.ndarray, input: np.ndarray, kernels: np.ndarray,
                    stride: int = 1, padding: int = 0
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    2次元畳み込みの逆伝播

    Returns:
        (grad_input, grad_kernels, grad_bias)
    """
    x, added = _to_batch(input, "input")
    g, _ = _to_batch(grad_out, "grad_out")
    _check_conv_args(x, kernels, stride, padding)
    n, channels, height, width = x.shape
    filters, _, kh, kw = kernels.shape
    out_h = _output_extent(height, kh, stride, padding)
    out_w = _output_extent(width, kw, stride, padding)
    if g.shape != (n, filters, out_h, out_w):
        raise ShapeError(
            f"grad_out の形状 {g.shape} が順伝播の出力 {(n, filters, out_h, out_w)} と一致しません"
        )

    windows = _conv_windows(x, kh, kw, stride, padding)
    grad_kernels = np.einsum('nfhw,nchwij->fcij', g, windows, optimize=True)
    grad_bias = g.sum(axis=(0, 2, 3))

    # col2im：カーネル位置ごとに出力勾配を入力側へ足し戻す
    grad_padded = np.zeros(
        (n, channels, height + 2 * padding, width + 2 * padding), dtype=np.result_type(g, kernels)
    )
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1
    for i in range(kh):
        for j in range(kw):
            grad_padded[:, :, i:i + row_span:stride, j:j + col_span:stride] += np.einsum(
                'nfhw,fc->nchw', g, kernels[:, :, i, j], optimize=True
            )
    grad_input = grad_padded[:, :, padding:padding + height, padding:padding + width]
    if added:
        grad_input = grad_input[0]
    return np.ascontiguousarray(grad_input), grad_kernels, grad_bias


# ===== ReLU =====

def relu_forward(x: np.ndarray) -> np.ndarray:
    """y = max(x, 0)"""
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """順伝播の入力が正の位置だけ勾配を通す"""
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out {grad_out.shape} と x {x.shape} の形状が一致しません")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def guided_relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """guided backpropagation 用 ReLU：順伝播入力と逆伝播信号の両方が正の位置だけ通す"""
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out {grad_out.shape} と x {x.shape} の形状が一致しません")
    return np.where((x > 0) & (grad_out > 0), grad_out, 0).astype(grad_out.dtype, copy=False)


# ===== 最大プーリング =====

def maxpool_forward(x: np.ndarray, window: int, stride: int) -> Tuple[np.ndarray, PoolSwitches]:
    """
    最大プーリングの順伝播

    同値の最大が複数ある場合は最小のフラットインデックスを選ぶ。

    Returns:
        (y, switches): switches はサンプル内のフラット入力インデックス（int64）
    """
    if window < 1 or stride < 1:
        raise ArgumentError(f"window と stride は 1 以上: window={window}, stride={stride}")
    xb, added = _to_batch(x, "x")
    n, channels, height, width = xb.shape
    if window > height or window > width:
        raise ShapeError(f"プーリング窓 {window} が入力 {height}x{width} より大きい")

    windows = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2:4]
    flat = windows.reshape(n, channels, out_h, out_w, window * window)
    # argmax は最初の最大値を返す = 窓内の行優先で最小、すなわちフラットインデックス最小
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., np.newaxis], axis=-1)[..., 0]

    rows = np.arange(out_h)[:, np.newaxis] * stride + arg // window
    cols = np.arange(out_w)[np.newaxis, :] * stride + arg % window
    chan = np.arange(channels)[np.newaxis, :, np.newaxis, np.newaxis]
    switches = (chan * height * width + rows * width + cols).astype(np.int64)

    if added:
        return y[0], switches[0]
    return y, switches


def maxpool_backward(grad_out: np.ndarray, switches: PoolSwitches,
                     input_shape: Union[Tuple[int, ...], list]) -> np.ndarray:
    """記録したスイッチへ勾配を戻す（重複は加算）"""
    input_shape = tuple(input_shape)
    if grad_out.shape != switches.shape:
        raise ShapeError(f"grad_out {grad_out.shape} と switches {switches.shape} の形状が一致しません")
    batched = len(input_shape) == 4
    g = grad_out if batched else grad_out[np.newaxis]
    sw = switches if batched else switches[np.newaxis]
    n = g.shape[0]
    per_sample = int(np.prod(input_shape[-3:]))

    grad_flat = np.zeros((n, per_sample), dtype=grad_out.dtype)
    sample_index = np.broadcast_to(np.arange(n)[:, np.newaxis], (n, sw[0].size))
    np.add.at(grad_flat, (sample_index, sw.reshape(n, -1)), g.reshape(n, -1))
    return grad_flat.reshape(input_shape)


# ===== 全結合 =====

def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    全結合層の順伝播

    Args:
        x: [D] または [N,D]
        weights: [U,D]
        bias: [U]
    """
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"入力 {x.shape} と重み {weights.shape} の次元が一致しません")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias は [{weights.shape[0]}] である必要があります: shape={bias.shape}")
    return x @ weights.T + bias


def dense_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    全結合層の逆伝播

    Returns:
        (grad_x, grad_weights, grad_bias)
    """
    if grad_out.shape[-1] != weights.shape[0]:
        raise ShapeError(f"grad_out {grad_out.shape} と重み {weights.shape} の次元が一致しません")
    grad_x = grad_out @ weights
    if x.ndim == 1:
        grad_w = np.outer(grad_out, x)
        grad_b = grad_out.copy()
    else:
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


# ===== softmax・損失 =====

def _check_label(label, num_classes: int):
    labels = np.asarray(label)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ArgumentError(f"ラベルは整数である必要があります: {label!r}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ArgumentError(f"ラベル {label!r} がクラス数 {num_classes} の範囲外です")


def one_hot(label, num_classes: int, dtype=np.float32) -> np.ndarray:
    """ラベル（スカラーまたは [N]）を one-hot に変換"""
    _check_label(label, num_classes)
    return np.eye(num_classes, dtype=dtype)[np.asarray(label)]


def softmax(logits: np.ndarray) -> np.ndarray:
    """最終軸に沿った softmax（scipy 実装は最大値を差し引いてから指数を取る）"""
    return _scipy_softmax(logits, axis=-1).astype(logits.dtype, copy=False)


def cross_entropy(probs: np.ndarray, label) -> Union[float, np.ndarray]:
    """確率ベクトルに対する交差エントロピー（バッチ入力ならサンプルごと）"""
    _check_label(label, probs.shape[-1])
    tiny = np.finfo(probs.dtype).tiny
    picked = np.take_along_axis(
        np.atleast_2d(probs), np.atleast_1d(np.asarray(label))[:, np.newaxis], axis=-1
    )[:, 0]
    loss = -np.log(np.maximum(picked, tiny))
    return float(loss[0]) if probs.ndim == 1 else loss


def cross_entropy_from_logits(logits: np.ndarray, label) -> Union[float, np.ndarray]:
    """ロジットから直接計算する交差エントロピー（log_softmax で飽和に強い）"""
    _check_label(label, logits.shape[-1])
    log_probs = np.atleast_2d(log_softmax(logits, axis=-1))
    picked = np.take_along_axis(
        log_probs, np.atleast_1d(np.asarray(label))[:, np.newaxis], axis=-1
    )[:, 0]
    return float(-picked[0]) if logits.ndim == 1 else -picked


def loss_gradient(logits: np.ndarray, label) -> np.ndarray:
    """交差エントロピーのロジット勾配 = probs - onehot(label)"""
    _check_label(label, logits.shape[-1])
    return softmax(logits) - one_hot(label, logits.shape[-1], dtype=logits.dtype)
