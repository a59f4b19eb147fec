"""
データセットサービスのテスト
tests/test_dataset.py
"""
import gzip
import struct

import numpy as np
import pytest

from core.exceptions import ArgumentError, FormatError
from services.dataset_service import Dataset, image_ids_for, load_idx, select_samples, synth_shapes


def _idx_images(pixels: np.ndarray) -> bytes:
    count, rows, cols = pixels.shape
    return struct.pack(">IIII", 0x00000803, count, rows, cols) + pixels.astype(np.uint8).tobytes()


def _idx_labels(labels) -> bytes:
    return struct.pack(">II", 0x00000801, len(labels)) + bytes(labels)


@pytest.fixture
def idx_files(tmp_path):
    """2x2 画像 1枚（画素 0, 255, 128, 64）とラベル 3"""
    images = tmp_path / "images.idx"
    labels = tmp_path / "labels.idx"
    images.write_bytes(_idx_images(np.array([[[0, 255], [128, 64]]])))
    labels.write_bytes(_idx_labels([3]))
    return images, labels


class TestLoadIdx:
    """IDX ローダー"""

    def test_pixels_are_scaled(self, idx_files):
        dataset = load_idx(str(idx_files[0]), str(idx_files[1]))
        assert dataset.images.shape == (1, 1, 2, 2)
        assert dataset.images.dtype == np.float32
        np.testing.assert_allclose(dataset.images[0, 0], [[0.0, 1.0], [128 / 255, 64 / 255]], rtol=1e-6)
        assert dataset.labels.tolist() == [3]

    def test_gzip_files(self, tmp_path):
        images = tmp_path / "images.idx.gz"
        labels = tmp_path / "labels.idx.gz"
        images.write_bytes(gzip.compress(_idx_images(np.full((2, 3, 3), 51))))
        labels.write_bytes(gzip.compress(_idx_labels([0, 1])))
        dataset = load_idx(str(images), str(labels))
        assert len(dataset) == 2
        np.testing.assert_allclose(dataset.images, 0.2, rtol=1e-6)

    def test_header_only_gives_empty_dataset(self, tmp_path):
        images = tmp_path / "images.idx"
        labels = tmp_path / "labels.idx"
        images.write_bytes(struct.pack(">IIII", 0x00000803, 0, 28, 28))
        labels.write_bytes(struct.pack(">II", 0x00000801, 0))
        dataset = load_idx(str(images), str(labels))
        assert len(dataset) == 0
        assert dataset.images.shape == (0, 1, 28, 28)

    def test_bad_magic(self, tmp_path, idx_files):
        images = tmp_path / "wrong.idx"
        images.write_bytes(struct.pack(">IIII", 0x00000801, 1, 2, 2) + bytes(4))
        with pytest.raises(FormatError) as info:
            load_idx(str(images), str(idx_files[1]))
        assert info.value.offset == 0

    def test_truncated_pixels(self, tmp_path, idx_files):
        images = tmp_path / "short.idx"
        images.write_bytes(idx_files[0].read_bytes()[:-1])
        with pytest.raises(FormatError):
            load_idx(str(images), str(idx_files[1]))

    def test_trailing_bytes(self, tmp_path, idx_files):
        images = tmp_path / "long.idx"
        images.write_bytes(idx_files[0].read_bytes() + b"\x00")
        with pytest.raises(FormatError) as info:
            load_idx(str(images), str(idx_files[1]))
        assert info.value.offset == 20

    def test_label_count_mismatch(self, tmp_path, idx_files):
        labels = tmp_path / "labels2.idx"
        labels.write_bytes(_idx_labels([1, 2]))
        with pytest.raises(FormatError):
            load_idx(str(idx_files[0]), str(labels))

    def test_label_out_of_range(self, tmp_path, idx_files):
        labels = tmp_path / "labels_bad.idx"
        labels.write_bytes(_idx_labels([3]))
        with pytest.raises(FormatError) as info:
            load_idx(str(idx_files[0]), str(labels), num_classes=3)
        assert info.value.offset == 8

    def test_missing_file_raises_os_error(self, tmp_path, idx_files):
        with pytest.raises(OSError):
            load_idx(str(tmp_path / "missing.idx"), str(idx_files[1]))


class TestSynthShapes:
    """合成図形データセット"""

    def test_same_seed_is_identical(self):
        first = synth_shapes(12, seed=9)
        second = synth_shapes(12, seed=9)
        np.testing.assert_array_equal(first.images, second.images)
        np.testing.assert_array_equal(first.labels, second.labels)

    def test_different_seed_differs(self):
        assert not np.array_equal(synth_shapes(8, seed=1).images, synth_shapes(8, seed=2).images)

    def test_classes_are_balanced(self):
        counts = np.bincount(synth_shapes(42, seed=0).labels, minlength=4)
        assert counts.max() - counts.min() <= 1

    def test_values_and_shape(self, small_synth):
        assert small_synth.images.shape == (40, 1, 28, 28)
        assert small_synth.num_classes == 4
        assert small_synth.images.min() >= 0.0
        assert small_synth.images.max() <= 1.0

    def test_shape_is_brighter_than_background(self, small_synth):
        # 図形の画素（輝度 0.5 以上）が必ず存在する
        assert np.all(small_synth.images.reshape(40, -1).max(axis=1) > 0.4)

    def test_custom_size(self):
        assert synth_shapes(4, seed=0, size=12).image_shape == (1, 12, 12)

    def test_zero_count_rejected(self):
        with pytest.raises(ArgumentError):
            synth_shapes(0, seed=0)


class TestDataset:
    """Dataset の検証と切り出し"""

    def test_arrays_are_read_only(self, small_synth):
        with pytest.raises(ValueError):
            small_synth.images[0, 0, 0, 0] = 0.5

    def test_out_of_range_pixels_rejected(self):
        with pytest.raises(ArgumentError):
            Dataset(np.full((1, 1, 2, 2), 1.5), np.array([0]), num_classes=2)

    def test_label_count_mismatch_rejected(self):
        with pytest.raises(ArgumentError):
            Dataset(np.zeros((2, 1, 2, 2)), np.array([0]), num_classes=2)

    def test_sequential_selection(self, small_synth):
        selected = select_samples(small_synth, count=5, start=3)
        np.testing.assert_array_equal(selected.images, small_synth.images[3:8])
        np.testing.assert_array_equal(image_ids_for(small_synth, 5, 3), np.arange(3, 8))

    def test_by_class_selection_is_stable(self, small_synth):
        selected = select_samples(small_synth, count=12, selection="by_class")
        ids = image_ids_for(small_synth, 12, selection="by_class")
        assert selected.labels.tolist() == sorted(selected.labels.tolist())
        np.testing.assert_array_equal(selected.labels, small_synth.labels[ids])
        zero_ids = ids[selected.labels == 0]
        assert zero_ids.tolist() == sorted(zero_ids.tolist())

    def test_count_past_end_is_truncated(self, small_synth):
        assert len(select_samples(small_synth, count=100, start=35)) == 5

    def test_unknown_selection_rejected(self, small_synth):
        with pytest.raises(ArgumentError):
            select_samples(small_synth, count=1, selection="random")
