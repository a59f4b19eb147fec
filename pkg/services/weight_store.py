"""
重みファイルの保存・読み込み
services/weight_store.py

バイナリ（リトルエンディアン）形式:
    magic "FSNT" | version u32 | ネットワーク定義テキスト長 u32 + UTF-8 | テンソル数 u32
    テンソルごとに: 名前長 u32 + UTF-8 | rank u32 | extents u32*rank | float32 生データ
    末尾: 先行する全バイトの CRC-32 (u32)
"""
import os
import struct
import tempfile
import zlib
from typing import Tuple

import numpy as np

from core.exceptions import ChecksumError, FormatError
from core.network import NetworkSpec, Parameters
from utils.advanced_logging import logger
from utils.constants import WEIGHTS_FORMAT_VERSION, WEIGHTS_MAGIC

_U32 = struct.Struct("<I")


def serialize_weights(spec: NetworkSpec, params: Parameters) -> bytes:
    """(spec, params) をコンテナのバイト列に変換"""
    params.validate(spec)
    chunks = [WEIGHTS_MAGIC, _U32.pack(WEIGHTS_FORMAT_VERSION)]
    spec_bytes = spec.to_text().encode("utf-8")
    chunks += [_U32.pack(len(spec_bytes)), spec_bytes, _U32.pack(len(params.tensors))]
    for name, value in params.items():
        name_bytes = name.encode("utf-8")
        chunks += [_U32.pack(len(name_bytes)), name_bytes, _U32.pack(value.ndim)]
        chunks += [_U32.pack(extent) for extent in value.shape]
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    body = b"".join(chunks)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    """オフセットを追跡しながらバイト列を読むヘルパー"""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"{what} の途中でデータが終わっています", offset=self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def text(self, what: str) -> str:
        start = self.offset
        length = self.u32(f"{what} の長さ")
        try:
            return self.take(length, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{what} が UTF-8 ではありません: {e}", offset=start)


def deserialize_weights(data: bytes) -> Tuple[NetworkSpec, Parameters]:
    """コンテナのバイト列から (spec, params) を復元する。失敗時は部分的な結果を返さない"""
    reader = _Reader(data)
    magic = reader.take(len(WEIGHTS_MAGIC), "magic")
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"magic が不正です: {magic!r}", offset=0)
    version_offset = reader.offset
    version = reader.u32("version")
    if version != WEIGHTS_FORMAT_VERSION:
        raise FormatError(f"未対応のフォーマットバージョン {version}", offset=version_offset)
    if len(data) < reader.offset + 4:
        raise FormatError("CRC を含むには短すぎます", offset=len(data))
    body, stored = data[:-4], _U32.unpack(data[-4:])[0]
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if actual != stored:
        raise ChecksumError(
            f"CRC-32 が一致しません（保存値 {stored:08x}, 計算値 {actual:08x}）", offset=len(body)
        )

    reader = _Reader(body)
    reader.offset = version_offset + 4
    spec_offset = reader.offset
    try:
        spec = NetworkSpec.from_text(reader.text("spec"))
    except (ValueError, TypeError, IndexError) as e:
        raise FormatError(f"ネットワーク定義を解釈できません: {e}", offset=spec_offset)
    count = reader.u32("テンソル数")
    tensors = {}
    for _ in range(count):
        name = reader.text("テンソル名")
        rank = reader.u32(f"{name} の rank")
        shape = tuple(reader.u32(f"{name} の extent") for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) * 4
        raw = reader.take(size, f"{name} のデータ")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if reader.offset != len(body):
        raise FormatError("テンソル列の後ろに余分なデータがあります", offset=reader.offset)

    params = Parameters(tensors)
    try:
        params.validate(spec)
    except (ValueError, ArithmeticError) as e:
        raise FormatError(f"パラメータがネットワーク定義と整合しません: {e}", offset=spec_offset)
    return spec, params


def save_weights(spec: NetworkSpec, params: Parameters, path: str):
    """一時ファイルに書いてから置き換える（途中で失敗しても壊れたファイルを残さない）"""
    data = serialize_weights(spec, params)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".weights-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.info(f"Weights saved: {path}", component="weights", bytes=len(data),
                tensors=len(params.tensors))


def load_weights(path: str) -> Tuple[NetworkSpec, Parameters]:
    """重みファイルを読み込む"""
    with open(path, "rb") as f:
        data = f.read()
    spec, params = deserialize_weights(data)
    logger.debug(f"Weights loaded: {path}", component="weights", bytes=len(data))
    return spec, params
