"""
ワンピクセル攻撃（差分進化）のテスト
tests/test_one_pixel.py
"""
import numpy as np
import pytest

from core.exceptions import ConfigError
from services.attack_service import CountingModel, OnePixelConfig
from services.one_pixel_service import PixelDifferentialEvolution, one_pixel_attack


@pytest.fixture
def bright_image():
    """平均 0.51 でクラス 1 と判定される一様画像"""
    return np.full((1, 6, 6), 0.51)


def _config(**overrides):
    values = dict(seed=11, population=20, generations=10)
    values.update(overrides)
    return OnePixelConfig(**values)


def test_changes_at_most_n_pixels(separable_network, bright_image):
    result = one_pixel_attack(separable_network, bright_image, 1, _config(pixels=1))
    assert np.count_nonzero(result.perturbation) <= 1
    result = one_pixel_attack(separable_network, bright_image, 1, _config(pixels=3))
    assert np.count_nonzero(result.perturbation) <= 3


def test_same_seed_same_result(separable_network, bright_image):
    first = one_pixel_attack(separable_network, bright_image, 1, _config())
    second = one_pixel_attack(separable_network, bright_image, 1, _config())
    np.testing.assert_array_equal(first.adversarial, second.adversarial)
    assert first.history == second.history


def test_best_fitness_never_increases(separable_network, bright_image):
    result = one_pixel_attack(separable_network, bright_image, 1, _config())
    assert len(result.history) == result.iterations + 1
    assert np.all(np.diff(result.history) <= 0)


def test_uses_no_gradients_and_counts_population(separable_network, bright_image):
    result = one_pixel_attack(separable_network, bright_image, 1, _config())
    # 1画素では確率 5% を下回れないので全世代を実行する
    assert result.iterations == 10
    assert result.gradient_calls == 0
    assert result.forward_calls == 1 + 20 * 11 + 1


def test_finds_darkening_pixel(separable_network, bright_image):
    result = one_pixel_attack(separable_network, bright_image, 1, _config(population=40, generations=20))
    assert result.confidence_after < result.confidence_before


def test_already_misclassified(separable_network, bright_image):
    result = one_pixel_attack(separable_network, bright_image, 0, _config())
    assert result.pre_misclassified
    assert result.forward_calls == 2


def test_seed_required(separable_network, bright_image):
    with pytest.raises(ConfigError):
        one_pixel_attack(separable_network, bright_image, 1, OnePixelConfig())


class TestPixelDifferentialEvolution:
    """ソルバーの部品"""

    @pytest.fixture
    def solver(self, separable_network, bright_image):
        return PixelDifferentialEvolution(CountingModel(separable_network), bright_image, 1,
                                          _config(pixels=2, population=8))

    def test_population_shape(self, solver):
        population = solver.initial_population()
        assert population.shape == (8, 2, 3)

    def test_constrain_wraps_positions_and_clips_values(self, solver):
        population = np.array([[[7.5, -1.0, 1.4], [2.0, 3.0, -0.2]]])
        constrained = solver.constrain(population)
        np.testing.assert_allclose(constrained[0, 0], [1.5, 5.0, 1.0])
        np.testing.assert_allclose(constrained[0, 1], [2.0, 3.0, 0.0])

    def test_apply_sets_pixels(self, solver, bright_image):
        images = solver.apply(np.array([[[1.9, 4.2, 0.0], [5.0, 5.0, 1.0]]]))
        assert images[0, 0, 1, 4] == 0.0
        assert images[0, 0, 5, 5] == 1.0
        assert np.count_nonzero(images[0] != bright_image) == 2

    def test_donors_are_distinct_and_exclude_self(self, solver):
        donors = solver._donor_indices()
        assert donors.shape == (8, 3)
        for index, row in enumerate(donors):
            assert len(set(row.tolist())) == 3
            assert index not in row
            assert row.max() < 8
