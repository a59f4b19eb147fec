"""
局所空間エントロピー検出器のテスト
tests/test_detector.py
"""
import math
from collections import Counter

import numpy as np
import pytest
from scipy.stats import entropy as shannon_entropy

from core.exceptions import ArgumentError, ConfigError
from services.detector_service import (
    DetectorConfig,
    EntropyMap,
    Verdict,
    analyze_image,
    average_entropy,
    calibrate_threshold,
    decide,
    detect,
    local_spatial_entropy,
    save_entropy_map,
)
from utils.netpbm import load_image


def _histogram_oracle(patch: np.ndarray, bins: int) -> float:
    codes = np.clip(np.floor(patch.ravel() * bins), 0, bins - 1)
    _, counts = np.unique(codes, return_counts=True)
    return float(shannon_entropy(counts, base=2))


class TestLocalSpatialEntropy:
    """パッチごとのエントロピー"""

    @pytest.mark.parametrize("mode", ["histogram", "cooccurrence"])
    def test_constant_patch_has_zero_entropy(self, mode):
        entropy_map = local_spatial_entropy(np.full((3, 3), 0.4), DetectorConfig(mode=mode))
        np.testing.assert_allclose(entropy_map.values, 0.0, atol=1e-12)

    def test_nine_distinct_levels_give_log2_nine(self):
        gray = ((np.arange(9) + 0.5) / 9).reshape(3, 3)
        entropy_map = local_spatial_entropy(gray, DetectorConfig(bins=9))
        assert entropy_map.values.shape == (1, 1)
        assert entropy_map.values[0, 0] == pytest.approx(math.log2(9))

    def test_matches_brute_force_histogram(self, rng):
        gray = rng.random((7, 7))
        config = DetectorConfig(patch_size=3, stride=2, bins=4)
        entropy_map = local_spatial_entropy(gray, config)
        assert entropy_map.patch_count == 9
        for i in range(3):
            for j in range(3):
                patch = gray[2 * i:2 * i + 3, 2 * j:2 * j + 3]
                assert entropy_map.values[i, j] == pytest.approx(_histogram_oracle(patch, 4))

    def test_patch_count_formula(self, rng):
        entropy_map = local_spatial_entropy(rng.random((28, 28)), DetectorConfig(patch_size=5, stride=3))
        assert entropy_map.values.shape == (8, 8)

    def test_cooccurrence_counts_horizontal_pairs(self):
        gray = np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
        entropy_map = local_spatial_entropy(gray, DetectorConfig(mode="cooccurrence", bins=2))
        # 組 (0,1) と (1,0) が3回ずつ
        assert entropy_map.values[0, 0] == pytest.approx(1.0)

    def test_spatial_mode_uses_normalized_intensities(self):
        gray = np.zeros((3, 3))
        gray[0, 0] = gray[2, 2] = 0.5
        entropy_map = local_spatial_entropy(gray, DetectorConfig(mode="spatial"))
        assert entropy_map.values[0, 0] == pytest.approx(1.0)

    def test_spatial_mode_zero_patch(self):
        entropy_map = local_spatial_entropy(np.zeros((4, 4)), DetectorConfig(mode="spatial"))
        np.testing.assert_array_equal(entropy_map.values, np.zeros((2, 2)))

    def test_values_bounded(self, rng):
        config = DetectorConfig(patch_size=4, bins=64)
        entropy_map = local_spatial_entropy(rng.random((10, 10)), config)
        assert entropy_map.values.min() >= 0.0
        assert entropy_map.values.max() <= config.max_entropy + 1e-12

    def test_histogram_ignores_pixel_order(self, rng):
        patch = rng.random((4, 4))
        shuffled = rng.permutation(patch.ravel()).reshape(4, 4)
        config = DetectorConfig(patch_size=4, bins=8)
        assert local_spatial_entropy(shuffled, config).values[0, 0] == pytest.approx(
            local_spatial_entropy(patch, config).values[0, 0], abs=1e-12)

    @pytest.mark.parametrize("mode", ["histogram", "cooccurrence"])
    def test_noise_scores_above_constant(self, rng, mode):
        config = DetectorConfig(patch_size=5, mode=mode)
        noise = average_entropy(local_spatial_entropy(rng.random((5, 5)), config))
        constant = average_entropy(local_spatial_entropy(np.full((5, 5), 0.7), config))
        assert noise > constant

    def test_patch_larger_than_image(self):
        with pytest.raises(ArgumentError):
            local_spatial_entropy(np.zeros((2, 2)), DetectorConfig(patch_size=3))

    def test_top_value_lands_in_last_bin(self):
        gray = np.array([[1.0, 1.0], [1.0, 31.5 / 32]])
        entropy_map = local_spatial_entropy(gray, DetectorConfig(patch_size=2))
        assert entropy_map.values[0, 0] == pytest.approx(0.0, abs=1e-12)


def _entropy_bits(counts) -> float:
    total = sum(counts)
    value = 0.0
    for count in counts:
        if count:
            p = count / total
            value -= p * math.log2(p)
    return value


def _direct_entropy(patch: np.ndarray, mode: str, bins: int) -> float:
    """1パッチのエントロピーを要素ごとのループで数える"""
    size = patch.shape[0]
    if mode == "spatial":
        total = float(patch.sum())
        return _entropy_bits([float(v) for v in patch.ravel()]) if total > 0 else 0.0
    levels = [[min(int(math.floor(patch[r, c] * bins)), bins - 1) for c in range(size)] for r in range(size)]
    if mode == "histogram":
        return _entropy_bits(list(Counter(v for row in levels for v in row).values()))
    pairs = Counter((row[c], row[c + 1]) for row in levels for c in range(size - 1))
    return _entropy_bits(list(pairs.values()))


def _upper_bound(mode: str, bins: int, size: int) -> float:
    if mode == "histogram":
        return math.log2(min(bins, size * size))
    if mode == "cooccurrence":
        return math.log2(min(bins * bins, size * (size - 1)))
    return math.log2(size * size)


class TestEntropyOracle:
    """1000 個のランダムパッチで直接数え上げと照合"""

    ROWS, COLS = 25, 40

    def _random_patches(self, rng, size):
        count = self.ROWS * self.COLS
        patches = rng.random((count, size, size))
        # 3段階だけの画素値・全ゼロのパッチも混ぜる
        coarse = rng.random(count) < 0.4
        patches[coarse] = np.floor(patches[coarse] * 3) / 3
        patches[rng.random(count) < 0.05] = 0.0
        return patches

    @pytest.mark.parametrize("mode", ["histogram", "cooccurrence", "spatial"])
    @pytest.mark.parametrize("size,bins", [(3, 8), (4, 32)])
    def test_matches_direct_summation(self, rng, mode, size, bins):
        patches = self._random_patches(rng, size)
        gray = patches.reshape(self.ROWS, self.COLS, size, size).transpose(0, 2, 1, 3).reshape(
            self.ROWS * size, self.COLS * size)
        config = DetectorConfig(patch_size=size, stride=size, mode=mode, bins=bins)
        values = local_spatial_entropy(gray, config).values
        assert values.shape == (self.ROWS, self.COLS)

        expected = np.array([_direct_entropy(patch, mode, bins) for patch in patches])
        np.testing.assert_allclose(values.ravel(), expected, rtol=0, atol=1e-6)
        assert values.min() >= 0.0
        assert values.max() <= _upper_bound(mode, bins, size) + 1e-12


class TestDecision:
    """判定としきい値の校正"""

    def test_strict_threshold(self):
        assert decide(1.5, 1.5) is Verdict.CLEAN
        assert decide(1.5000001, 1.5) is Verdict.ATTACKED
        assert decide(0.2, 1.5) is Verdict.CLEAN

    def test_decision_is_monotone_in_threshold(self, rng):
        thresholds = np.sort(rng.uniform(0.0, 4.0, size=50))
        for score in rng.uniform(0.0, 4.0, size=20):
            attacked = [decide(float(score), float(t)) is Verdict.ATTACKED for t in thresholds]
            # τ を上げると ATTACKED → CLEAN の一方向にしか変わらない
            assert attacked == sorted(attacked, reverse=True)

    def test_calibrate_on_uniform_scores(self):
        assert calibrate_threshold(np.arange(1, 101), 0.10) == 90.0
        assert calibrate_threshold(np.arange(1, 101), 0.05) == 95.0

    def test_calibrated_threshold_meets_false_positive_rate(self, rng):
        scores = rng.random(37)
        threshold = calibrate_threshold(scores, 0.1)
        assert np.sum(scores > threshold) <= math.floor(0.1 * 37)

    def test_calibrate_rejects_bad_input(self):
        with pytest.raises(ArgumentError):
            calibrate_threshold([], 0.1)
        with pytest.raises(ArgumentError):
            calibrate_threshold([1.0], 1.5)

    def test_average_of_empty_map(self):
        with pytest.raises(ArgumentError):
            average_entropy(EntropyMap(values=np.zeros((0, 0)), config=DetectorConfig()))


class TestDetectorConfig:
    """設定の検証"""

    @pytest.mark.parametrize("overrides,field", [
        ({"patch_size": 1}, "patch_size"),
        ({"stride": 0}, "stride"),
        ({"mode": "variance"}, "mode"),
        ({"bins": 1}, "bins"),
        ({"threshold": float("nan")}, "threshold"),
    ])
    def test_invalid_values(self, overrides, field):
        with pytest.raises(ConfigError) as info:
            DetectorConfig(**overrides).validate()
        assert info.value.field == field

    def test_max_entropy(self):
        assert DetectorConfig(patch_size=3).max_entropy == pytest.approx(math.log2(9))


class TestImagePipeline:
    """画像から判定まで"""

    def test_analyze_image(self, tiny_network, rng):
        analysis = analyze_image(tiny_network, rng.random((1, 6, 6)).astype(np.float32))
        assert analysis.gray.shape == (6, 6)
        assert analysis.entropy_map.values.shape == (4, 4)
        assert analysis.score == pytest.approx(float(np.mean(analysis.entropy_map.values)))

    def test_detect_requires_threshold(self, tiny_network, rng):
        with pytest.raises(ConfigError):
            detect(tiny_network, rng.random((1, 6, 6)), DetectorConfig())

    def test_detect_verdicts(self, tiny_network, rng):
        image = rng.random((1, 6, 6)).astype(np.float32)
        assert detect(tiny_network, image, DetectorConfig(threshold=-1.0)).verdict is Verdict.ATTACKED
        high = detect(tiny_network, image, DetectorConfig(threshold=100.0))
        assert high.verdict is Verdict.CLEAN
        assert high.patch_count == 16

    def test_save_entropy_map(self, tmp_path):
        config = DetectorConfig(patch_size=2)
        values = np.array([[0.0, 2.0], [1.0, 0.5]])
        path = tmp_path / "entropy.pgm"
        save_entropy_map(EntropyMap(values=values, config=config), str(path))
        np.testing.assert_allclose(load_image(str(path))[0], np.rint(values / 2.0 * 255) / 255, rtol=1e-6)
