"""
Netpbm（バイナリ PGM/PPM）の読み書き
utils/netpbm.py

P5（グレースケール）と P6（RGB）、maxval 255 のみ対応。
ヘッダー中の # コメントは行末まで読み飛ばす。書き出しは常に
"P5\\n{w} {h}\\n255\\n" 形式の正規ヘッダーを使う。
"""
import os
from typing import List, Tuple

import numpy as np

from core.exceptions import ArgumentError, FormatError, UnsupportedFormatError

_WHITESPACE = b" \t\r\n\v\f"
_CHANNELS = {b"P5": 1, b"P6": 3}
_ASCII_VARIANTS = (b"P1", b"P2", b"P3", b"P4")


def _header_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    """先頭から count 個のヘッダートークンを読み、ラスタ開始位置を返す"""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise FormatError("ヘッダーが途中で終わっています", offset=pos)
        byte = data[pos:pos + 1]
        if byte not in _WHITESPACE and byte != b"#":
            start = pos
            while pos < len(data) and data[pos:pos + 1] not in _WHITESPACE and data[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(data[start:pos])
        elif byte == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            pos += 1
    # maxval の直後は空白1バイト
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise FormatError("maxval の後に空白がありません", offset=pos)
    return tokens, pos + 1


def decode_netpbm(data: bytes) -> np.ndarray:
    """
    P5/P6 のバイト列を uint8 配列 [C,H,W] に変換する

    Raises:
        UnsupportedFormatError: ASCII 形式や maxval != 255
        FormatError: ヘッダー不正・ラスタ長の不一致
    """
    magic = data[:2]
    if magic in _ASCII_VARIANTS:
        raise UnsupportedFormatError(f"{magic.decode()} 形式には対応していません（P5/P6 のみ）", offset=0)
    if magic not in _CHANNELS:
        raise FormatError(f"Netpbm の magic ではありません: {magic!r}", offset=0)
    tokens, raster_start = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(token) for token in tokens[1:])
    except ValueError:
        raise FormatError(f"ヘッダーの数値が不正です: {tokens[1:]}", offset=2)
    if maxval != 255:
        raise UnsupportedFormatError(f"maxval {maxval} には対応していません（255 のみ）", offset=2)
    if width < 1 or height < 1:
        raise FormatError(f"画像サイズが不正です: {width}x{height}", offset=2)
    channels = _CHANNELS[magic]
    expected = width * height * channels
    raster = data[raster_start:]
    if len(raster) < expected:
        raise FormatError("画素データが途中で終わっています", offset=len(data))
    if len(raster) > expected:
        raise FormatError("画素データの後ろに余分なバイトがあります", offset=raster_start + expected)
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def encode_netpbm(pixels: np.ndarray) -> bytes:
    """uint8 配列 [C,H,W]（C=1 または 3）を P5/P6 のバイト列に変換する"""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[None]
    if pixels.ndim != 3 or pixels.shape[0] not in (1, 3) or pixels.dtype != np.uint8:
        raise ArgumentError(f"[1|3,H,W] の uint8 配列が必要です: shape={pixels.shape}, dtype={pixels.dtype}")
    channels, height, width = pixels.shape
    magic = "P5" if channels == 1 else "P6"
    header = f"{magic}\n{width} {height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes()


def to_u8(image: np.ndarray) -> np.ndarray:
    """[0,1] の画像を round(255·x) の uint8 に変換する"""
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def from_u8(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def load_image(path: str) -> np.ndarray:
    """PGM/PPM を [C,H,W] float32（[0,1]）として読み込む"""
    with open(path, "rb") as f:
        return from_u8(decode_netpbm(f.read()))


def save_image(image: np.ndarray, path: str):
    """[C,H,W] または [H,W] の [0,1] 画像を PGM/PPM で保存する"""
    data = encode_netpbm(to_u8(image))
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)


def load_pgm(path: str) -> np.ndarray:
    image = load_image(path)
    if image.shape[0] != 1:
        raise UnsupportedFormatError(f"{path} はグレースケール（P5）ではありません", offset=0)
    return image


def load_ppm(path: str) -> np.ndarray:
    image = load_image(path)
    if image.shape[0] != 3:
        raise UnsupportedFormatError(f"{path} はカラー（P6）ではありません", offset=0)
    return image
