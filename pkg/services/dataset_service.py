"""
データセットサービス
services/dataset_service.py

IDX（MNIST 形式）の読み込み、依存ファイル不要の合成図形データセット生成、
データセットの切り出し。ローダーは完全に妥当な Dataset を返すか例外を送出し、
部分的に埋まったデータセットは返さない。
"""
import gzip
import struct
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from core.exceptions import ArgumentError, FormatError
from utils.constants import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    SYNTH_CLASS_NAMES,
    SYNTH_IMAGE_SIZE,
    SYNTH_NOISE_AMPLITUDE,
)


@dataclass(frozen=True)
class Dataset:
    """
    画像 [N,C,H,W]（float32, [0,1]）とラベル [N] の組。構築後は変更しない

    Attributes:
        images: 画像テンソル
        labels: クラス ID（int64）
        num_classes: クラス数
        provenance: 由来を表す文字列
    """
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ArgumentError(f"images は [N,C,H,W] である必要があります: shape={images.shape}")
        if len(images) != len(labels) or labels.ndim != 1:
            raise ArgumentError(f"画像数 {len(images)} とラベル数 {len(labels)} が一致しません")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ArgumentError(f"ラベルがクラス数 {self.num_classes} の範囲外です")
        if images.size and (images.min() < 0.0 or images.max() > 1.0 or not np.all(np.isfinite(images))):
            raise ArgumentError("画素値は [0,1] の範囲である必要があります")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int], provenance: str = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=self.images[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            provenance=provenance or self.provenance,
        )


# ===== IDX =====

def _read_bytes(path: str) -> bytes:
    """.gz なら透過的に展開して読む"""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx_header(data: bytes, magic: int, dims: int, path: str) -> Tuple[int, ...]:
    header_size = 4 * (1 + dims)
    if len(data) < header_size:
        raise FormatError(f"{path}: ヘッダーが途中で切れています", offset=len(data))
    actual_magic = struct.unpack(">I", data[:4])[0]
    if actual_magic != magic:
        raise FormatError(f"{path}: magic 0x{actual_magic:08x} は 0x{magic:08x} ではありません", offset=0)
    return struct.unpack(f">{dims}I", data[4:header_size])


def load_idx(images_path: str, labels_path: str, num_classes: int = 10) -> Dataset:
    """
    IDX 画像・ラベルファイルを読み込む

    Args:
        images_path: 画像ファイル（magic 0x00000803）
        labels_path: ラベルファイル（magic 0x00000801）
        num_classes: クラス数

    Returns:
        Dataset: 画素は 1/255 でスケールされる
    """
    image_bytes = _read_bytes(images_path)
    label_bytes = _read_bytes(labels_path)

    count, rows, cols = _parse_idx_header(image_bytes, IDX_IMAGES_MAGIC, 3, images_path)
    expected = 16 + count * rows * cols
    if len(image_bytes) < expected:
        raise FormatError(f"{images_path}: 画素データが途中で切れています", offset=len(image_bytes))
    if len(image_bytes) > expected:
        raise FormatError(f"{images_path}: 画素データの後ろに余分なバイトがあります", offset=expected)

    (label_count,) = _parse_idx_header(label_bytes, IDX_LABELS_MAGIC, 1, labels_path)
    if label_count != count:
        raise FormatError(
            f"{labels_path}: ラベル数 {label_count} が画像数 {count} と一致しません", offset=4
        )
    if len(label_bytes) != 8 + label_count:
        raise FormatError(f"{labels_path}: ラベルデータの長さが不正です", offset=min(len(label_bytes), 8 + label_count))

    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=16, count=count * rows * cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=8, count=label_count).astype(np.int64)
    if label_count and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(f"{labels_path}: ラベル {labels[bad]} がクラス数 {num_classes} 以上です", offset=8 + bad)
    images = (pixels.astype(np.float32) / np.float32(255.0)).reshape(count, 1, rows, cols)
    return Dataset(images=images, labels=labels, num_classes=num_classes,
                   provenance=f"idx:{images_path}")


# ===== 合成図形データセット =====

def _shape_mask(kind: int, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, radius: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == 0:  # circle
        return dy ** 2 + dx ** 2 <= radius ** 2
    if kind == 1:  # square
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == 2:  # triangle（上向き）
        rel = (dy + radius) / (2 * radius)
        return (rel >= 0) & (rel <= 1) & (np.abs(dx) <= rel * radius)
    arm = max(radius / 3.0, 1.0)  # cross
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= radius))


def synth_shapes(count: int, seed: int, size: int = SYNTH_IMAGE_SIZE) -> Dataset:
    """
    塗りつぶし円・正方形・三角形・十字の4クラス合成データセット

    位置・大きさ・輝度はランダム、振幅 0.05 の一様ノイズを加える。
    ラベルは各クラス ±1 以内で均等。シードが同じなら同一のデータセット
    """
    if count < 1:
        raise ArgumentError(f"count は 1 以上: {count}")
    rng = np.random.default_rng(seed)
    num_classes = len(SYNTH_CLASS_NAMES)
    labels = rng.permutation(np.arange(count) % num_classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    images = np.zeros((count, 1, size, size), dtype=np.float32)
    for index, label in enumerate(labels):
        radius = rng.uniform(size * 0.15, size * 0.3)
        cy = rng.uniform(radius, size - 1 - radius)
        cx = rng.uniform(radius, size - 1 - radius)
        intensity = rng.uniform(0.5, 1.0)
        canvas = _shape_mask(int(label), yy, xx, cy, cx, radius).astype(np.float32) * np.float32(intensity)
        noise = rng.uniform(-SYNTH_NOISE_AMPLITUDE, SYNTH_NOISE_AMPLITUDE, size=(size, size))
        images[index, 0] = np.clip(canvas + noise, 0.0, 1.0)
    return Dataset(images=images, labels=labels, num_classes=num_classes,
                   provenance=f"synth:count={count},seed={seed}")


# ===== 切り出し =====

def select_samples(dataset: Dataset, count: int, start: int = 0, selection: str = "sequential") -> Dataset:
    """
    評価用サンプルを選ぶ

    Args:
        dataset: 元データセット
        count: 取り出す件数（残りが少なければその分だけ）
        start: 開始位置（並べ替え後の順序に対して）
        selection: "sequential"（インデックス順）または "by_class"（ラベル順→インデックス順）
    """
    if count < 1 or start < 0:
        raise ArgumentError(f"count >= 1, start >= 0 が必要: count={count}, start={start}")
    if selection == "sequential":
        order = np.arange(len(dataset))
    elif selection == "by_class":
        order = np.argsort(dataset.labels, kind="stable")
    else:
        raise ArgumentError(f"未知の selection: {selection!r}")
    return dataset.subset(order[start:start + count])


def image_ids_for(dataset: Dataset, count: int, start: int = 0, selection: str = "sequential") -> np.ndarray:
    """select_samples と同じ順序で元データセットのインデックスを返す（出力の image_id 用）"""
    if selection == "by_class":
        order = np.argsort(dataset.labels, kind="stable")
    else:
        order = np.arange(len(dataset))
    return order[start:start + count]
