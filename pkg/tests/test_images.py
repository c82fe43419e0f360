import numpy as np
import pytest

from services.errors import UsageError
from services.tools.image_tools import (
    flip_horizontal, match_channels, random_flip, read_image, resize_with_cap, write_image,
)


class TestResize:
    def test_large_image_is_halved(self):
        image, points = resize_with_cap(np.zeros((1, 1536, 2048)), [(100.0, 200.0)])
        assert image.shape == (1, 768, 1024)
        np.testing.assert_allclose(points, [[50.0, 100.0]])

    def test_fitting_image_is_unchanged(self, rng):
        original = rng.uniform(size=(3, 480, 640))
        image, points = resize_with_cap(original, [(5.0, 7.0)])
        np.testing.assert_array_equal(image, original)
        np.testing.assert_array_equal(points, [[5.0, 7.0]])

    def test_square_image_keeps_aspect(self):
        image, _ = resize_with_cap(np.zeros((1, 2000, 2000)), np.zeros((0, 2)))
        assert image.shape == (1, 768, 768)

    def test_crop_to_multiple_shifts_and_drops_points(self):
        image, points = resize_with_cap(np.ones((1, 100, 70)), [(3.0, 50.0), (1.0, 1.0)])
        assert image.shape == (1, 96, 64)
        np.testing.assert_array_equal(points, [[0.0, 48.0]])

    def test_small_side_is_padded(self):
        image, _ = resize_with_cap(np.ones((1, 20, 40)), np.zeros((0, 2)))
        assert image.shape == (1, 32, 32)
        assert image[0, 20:].sum() == 0

    def test_never_enlarges(self):
        image, _ = resize_with_cap(np.zeros((1, 64, 64)), np.zeros((0, 2)))
        assert image.shape == (1, 64, 64)


class TestFlip:
    def test_point_mirrors_across_the_width(self):
        image = np.arange(100, dtype=float).reshape(1, 1, 100)
        flipped, points = flip_horizontal(image, [(0.0, 0.0)])
        np.testing.assert_array_equal(points, [[99.0, 0.0]])
        assert flipped[0, 0, 0] == 99.0

    def test_twice_is_identity(self, rng):
        image = rng.uniform(size=(3, 8, 12))
        points = rng.uniform(0, 8, (5, 2))
        back_image, back_points = flip_horizontal(*flip_horizontal(image, points))
        np.testing.assert_array_equal(back_image, image)
        np.testing.assert_allclose(back_points, points)

    def test_probability_bounds(self, rng):
        image = rng.uniform(size=(1, 4, 4))
        for _ in range(20):
            assert not random_flip(image, [(1.0, 1.0)], 0.0, rng)[2]
            assert random_flip(image, [(1.0, 1.0)], 1.0, rng)[2]
        with pytest.raises(UsageError):
            random_flip(image, [], 1.5, rng)


class TestImageFiles:
    def test_colour_round_trip(self, tmp_path, rng):
        image = np.round(rng.uniform(size=(3, 5, 7)) * 255) / 255
        np.testing.assert_allclose(read_image(write_image(tmp_path / 'a.ppm', image)), image, atol=1e-12)

    def test_grey_round_trip(self, tmp_path):
        image = np.full((1, 4, 4), 128 / 255)
        loaded = read_image(write_image(tmp_path / 'a.pgm', image))
        assert loaded.shape == (1, 4, 4)
        np.testing.assert_allclose(loaded, image)

    def test_unsupported_suffix(self, tmp_path):
        with pytest.raises(UsageError):
            read_image(tmp_path / 'photo.jpg')

    def test_match_channels(self):
        grey = np.full((1, 2, 2), 0.5)
        assert match_channels(grey, 3).shape == (3, 2, 2)
        np.testing.assert_allclose(match_channels(np.stack([np.zeros((2, 2)), np.ones((2, 2)), np.ones((2, 2))]), 1),
                                   np.full((1, 2, 2), 2 / 3))
