"""Pixel containers, resizing, integral images and the median filter."""

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retina_bow.imgcore import (
    ImageError,
    RgbImage,
    box_sum,
    integral_image,
    load_image,
    median_filter,
    median_kernel_size,
    resize_to_height,
)


def naive_sum(p, x, y, w, h):
    """Double loop over the clipped rectangle."""
    total = 0.0
    for r in range(max(y, 0), min(y + h, p.shape[0])):
        for c in range(max(x, 0), min(x + w, p.shape[1])):
            total += p[r, c]
    return total


def sorting_median(p, k):
    """Median of every edge-replicated k x k window by explicit sorting."""
    r = k // 2
    padded = np.pad(p, r, mode="edge")
    out = np.empty_like(p)
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            win = np.sort(padded[i:i + k, j:j + k].ravel())
            out[i, j] = win[win.size // 2]
    return out


def write_png(path, rgb):
    cv2.imwrite(str(path), cv2.cvtColor(np.asarray(rgb, np.uint8), cv2.COLOR_RGB2BGR))
    return path


class TestRgbImage:
    def test_planes_are_read_only_copies(self):
        a = np.zeros((2, 3, 3))
        img = RgbImage.from_array(a)
        a[0, 0, 0] = 1.0
        assert img.red[0, 0] == 0.0
        with pytest.raises(ValueError):
            img.red[0, 0] = 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ImageError):
            RgbImage(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))

    def test_zero_dimension(self):
        with pytest.raises(ImageError):
            RgbImage(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))

    def test_round_trip(self):
        a = np.random.default_rng(0).random((4, 5, 3))
        np.testing.assert_array_equal(RgbImage.from_array(a).to_array(), a)


class TestLoadImage:
    def test_white_pixel(self, tmp_path):
        img = load_image(write_png(tmp_path / "w.png", np.full((1, 1, 3), 255)))
        for p in img.channels:
            np.testing.assert_array_equal(p, [[1.0]])

    def test_black_pixel(self, tmp_path):
        img = load_image(write_png(tmp_path / "b.png", np.zeros((1, 1, 3))))
        for p in img.channels:
            np.testing.assert_array_equal(p, [[0.0]])

    def test_scale_and_channel_order(self, tmp_path):
        img = load_image(write_png(tmp_path / "c.png", [[[128, 0, 255]]]))
        assert img.red[0, 0] == pytest.approx(128 / 255)
        assert img.red[0, 0] == pytest.approx(0.50196, abs=1e-5)
        assert img.green[0, 0] == 0.0
        assert img.blue[0, 0] == 1.0

    def test_grayscale_and_16_bit(self, tmp_path):
        cv2.imwrite(str(tmp_path / "g.png"), np.array([[0, 65535]], dtype=np.uint16))
        img = load_image(tmp_path / "g.png")
        for p in img.channels:
            np.testing.assert_array_equal(p, [[0.0, 1.0]])

    def test_missing_and_garbage(self, tmp_path):
        with pytest.raises(ImageError):
            load_image(tmp_path / "none.png")
        (tmp_path / "junk.png").write_bytes(b"not an image at all")
        with pytest.raises(ImageError):
            load_image(tmp_path / "junk.png")


class TestResize:
    @pytest.mark.parametrize("h, w, expected", [(1958, 2196, 574), (605, 700, 592), (512, 700, 700)])
    def test_width_rule(self, h, w, expected):
        img = RgbImage.from_array(np.zeros((h, w, 3)))
        out = resize_to_height(img, 512)
        assert (out.height, out.width) == (512, expected)

    def test_identity_at_target(self):
        img = RgbImage.from_array(np.random.default_rng(1).random((512, 37, 3)))
        assert resize_to_height(img, 512) is img

    def test_upscales_small_images(self):
        out = resize_to_height(RgbImage.from_array(np.ones((100, 50, 3))), 512)
        assert (out.height, out.width) == (512, 256)
        np.testing.assert_allclose(out.green, 1.0)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            resize_to_height(RgbImage.from_array(np.ones((4, 4, 3))), 0)


class TestIntegralImage:
    def test_ones(self):
        ii = integral_image(np.ones((3, 3)))
        assert ii.shape == (4, 4)
        assert ii[-1, -1] == 9
        np.testing.assert_array_equal(ii[0], 0)
        np.testing.assert_array_equal(ii[:, 0], 0)

    def test_single_pixel(self):
        assert integral_image(np.array([[2.5]]))[1, 1] == 2.5

    def test_entry_is_sum_above_left(self):
        p = np.random.default_rng(2).integers(0, 10, (6, 7)).astype(float)
        ii = integral_image(p)
        for y in range(7):
            for x in range(8):
                assert ii[y, x] == p[:y, :x].sum()

    def test_monotone_for_non_negative(self):
        ii = integral_image(np.random.default_rng(3).random((20, 30)))
        assert np.all(np.diff(ii, axis=0) >= 0)
        assert np.all(np.diff(ii, axis=1) >= 0)


class TestBoxSum:
    def test_every_rectangle_of_small_plane(self):
        p = np.random.default_rng(4).random((8, 8))
        ii = integral_image(p)
        for y in range(8):
            for x in range(8):
                for h in range(0, 9 - y):
                    for w in range(0, 9 - x):
                        assert box_sum(ii, x, y, w, h) == pytest.approx(p[y:y + h, x:x + w].sum(), abs=1e-12)

    def test_full_zero_and_interior(self):
        p = np.random.default_rng(5).integers(0, 255, (10, 12)).astype(float)
        ii = integral_image(p)
        assert box_sum(ii, 0, 0, 12, 10) == p.sum()
        assert box_sum(ii, 3, 4, 0, 5) == 0.0
        assert box_sum(ii, 2, 5, 3, 2) == naive_sum(p, 2, 5, 3, 2)

    def test_clipping(self):
        p = np.arange(20, dtype=float).reshape(4, 5)
        ii = integral_image(p)
        assert box_sum(ii, -2, -3, 4, 5) == naive_sum(p, -2, -3, 4, 5)
        assert box_sum(ii, 3, 2, 10, 10) == naive_sum(p, 3, 2, 10, 10)
        assert box_sum(ii, 50, 50, 3, 3) == 0.0
        assert box_sum(ii, -10, 0, 5, 4) == 0.0

    def test_vectorized(self):
        p = np.random.default_rng(6).integers(0, 9, (16, 16)).astype(float)
        ii = integral_image(p)
        xs, ys = np.array([0, 3, 7]), np.array([1, 2, 9])
        got = box_sum(ii, xs, ys, 4, 5)
        np.testing.assert_array_equal(got, [naive_sum(p, x, y, 4, 5) for x, y in zip(xs, ys)])

    @settings(max_examples=200, deadline=None)
    @given(
        st.integers(1, 24), st.integers(1, 24), st.integers(0, 2**31 - 1),
        st.integers(-30, 30), st.integers(-30, 30), st.integers(0, 40), st.integers(0, 40),
    )
    def test_matches_naive_on_integer_planes(self, h, w, seed, x, y, bw, bh):
        p = np.random.default_rng(seed).integers(0, 256, (h, w)).astype(float)
        assert box_sum(integral_image(p), x, y, bw, bh) == naive_sum(p, x, y, bw, bh)

    def test_relative_error_on_large_real_plane(self):
        rng = np.random.default_rng(7)
        p = rng.random((2048, 2048))
        ii = integral_image(p)
        for _ in range(50):
            x, y = rng.integers(0, 2048, 2)
            w, h = rng.integers(1, 2049 - x), rng.integers(1, 2049 - y)
            ref = np.sum(p[y:y + h, x:x + w], dtype=np.float64)
            assert abs(box_sum(ii, x, y, w, h) - ref) <= 1e-9 * abs(ref)


class TestMedian:
    def test_kernel_rule(self):
        assert median_kernel_size(512) == 17
        assert median_kernel_size(605) == 21  # round(20.17) = 20 -> 21
        assert median_kernel_size(30) == 1
        assert median_kernel_size(60) == 3

    def test_constant(self):
        p = np.full((9, 11), 0.3)
        np.testing.assert_array_equal(median_filter(p, 5), p)

    def test_impulse_removed(self):
        p = np.zeros((7, 7))
        p[3, 3] = 1.0
        np.testing.assert_array_equal(median_filter(p, 3), 0.0)

    @pytest.mark.parametrize("k", [0, 2, -3])
    def test_bad_window(self, k):
        with pytest.raises(ValueError):
            median_filter(np.zeros((5, 5)), k)

    @pytest.mark.parametrize("k", [1, 3, 5, 17])
    def test_real_valued_matches_sorting_oracle(self, k):
        p = np.random.default_rng(k).normal(size=(23, 19))
        np.testing.assert_array_equal(median_filter(p, k), sorting_median(p, k))

    @pytest.mark.parametrize("k", [3, 7, 17])
    def test_byte_grid_matches_sorting_oracle(self, k):
        p = np.random.default_rng(10 + k).integers(0, 256, (40, 33)) / 255.0
        np.testing.assert_array_equal(median_filter(p, k), sorting_median(p, k))

    def test_range_and_shift(self):
        rng = np.random.default_rng(11)
        p = rng.random((30, 30))
        out = median_filter(p, 5)
        assert out.min() >= p.min() and out.max() <= p.max()
        np.testing.assert_allclose(median_filter(p + 0.25, 5), out + 0.25, atol=1e-15)
