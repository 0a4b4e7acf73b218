"""SURF detection, orientation, description and dense extraction."""

import math

import numpy as np
import pytest
from scipy import ndimage

from retina_bow.features import Kind, NoDescriptorsError
from retina_bow.imgcore import RgbImage, integral_image
from retina_bow.surf import (
    DENSE_SIGMA,
    HessianConfig,
    Keypoint,
    assign_orientation,
    assign_orientations,
    box_filter_responses,
    centred_integral,
    dense_centres,
    dense_surf,
    describe,
    detect_keypoints,
    filter_scale,
    hessian_determinant,
    hessian_response,
    response_stack,
    sparse_surf,
    surf_plane,
)


def naive_kernels(size):
    """Weighted box-filter kernels built cell by cell, centred at (c, c)."""
    lobe = size // 3
    c = size // 2
    kxx = np.zeros((size, size))
    kyy = np.zeros((size, size))
    kxy = np.zeros((size, size))
    for dy in range(-c, c + 1):
        for dx in range(-c, c + 1):
            if abs(dy) <= lobe - 1:
                kxx[c + dy, c + dx] = -2.0 if abs(dx) <= lobe // 2 else 1.0
            if abs(dx) <= lobe - 1:
                kyy[c + dy, c + dx] = -2.0 if abs(dy) <= lobe // 2 else 1.0
            if 1 <= abs(dx) <= lobe and 1 <= abs(dy) <= lobe:
                # top-right and bottom-left lobes positive (y grows downwards)
                kxy[c + dy, c + dx] = 1.0 if dx * dy < 0 else -1.0
    return kxx, kyy, kxy


def naive_response(p, size):
    """Direct weighted sums at interior pixels; zero where the filter leaves the image."""
    kxx, kyy, kxy = naive_kernels(size)
    c = size // 2
    h, w = p.shape
    dxx, dyy, dxy = np.zeros((3, h, w))
    for r in range(c, h - c):
        for col in range(c, w - c):
            win = p[r - c:r + c + 1, col - c:col + c + 1]
            dxx[r, col] = np.sum(win * kxx)
            dyy[r, col] = np.sum(win * kyy)
            dxy[r, col] = np.sum(win * kxy)
    norm = 1.0 / (size * size)
    dxx, dyy, dxy = dxx * norm, dyy * norm, dxy * norm
    return dxx * dyy - (0.9 * dxy) ** 2


def blob(shape, centres, sigma, amp=1.0):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    out = np.zeros(shape)
    for cy, cx in centres:
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return out


class TestConfig:
    def test_schedule(self):
        cfg = HessianConfig()
        assert cfg.filter_sizes(0) == [9, 15, 21, 27]
        assert cfg.filter_sizes(1) == [15, 27, 39, 51]
        assert cfg.filter_sizes(2) == [27, 51, 75, 99]
        assert cfg.filter_sizes(3) == [51, 99, 147, 195]
        assert [cfg.step(o) for o in range(4)] == [2, 4, 8, 16]

    def test_filter_scale(self):
        assert filter_scale(9) == pytest.approx(1.2)
        assert filter_scale(27) == pytest.approx(3.6)

    @pytest.mark.parametrize("kw", [{"initial_filter": 11}, {"threshold": -1.0}, {"intervals": 2}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            HessianConfig(**kw)


class TestHessian:
    def test_weighted_determinant(self):
        assert hessian_determinant(2.0, 2.0, 1.0) == pytest.approx(3.19)

    @pytest.mark.parametrize("size", [8, 10, 12, 7])
    def test_bad_size(self, size):
        with pytest.raises(ValueError):
            box_filter_responses(integral_image(np.zeros((40, 40))), size, [20], [20])

    def test_constant_is_zero(self):
        # dyadic constant: every cumulative sum is exact
        ii = integral_image(np.full((64, 64), 0.375))
        for size in (9, 15, 27):
            np.testing.assert_array_equal(hessian_response(ii, size), 0.0)
        ii = centred_integral(np.full((64, 64), 0.37))
        for size in (9, 15, 27):
            np.testing.assert_array_equal(hessian_response(ii, size), 0.0)
        # raw integral of a non-dyadic constant: zero up to cumulative rounding
        ii = integral_image(np.full((64, 64), 0.37))
        np.testing.assert_allclose(hessian_response(ii, 9), 0.0, atol=1e-24)

    def test_centring_changes_nothing_else(self):
        p = np.random.default_rng(8).integers(0, 256, (48, 48)).astype(float)
        np.testing.assert_array_equal(
            hessian_response(centred_integral(p + 5.0), 15), hessian_response(integral_image(p), 15)
        )

    @pytest.mark.parametrize("size", [9, 15, 21])
    def test_matches_naive_oracle_on_integer_plane(self, size):
        p = np.random.default_rng(size).integers(0, 256, (40, 44)).astype(float)
        got = hessian_response(integral_image(p), size)
        np.testing.assert_array_equal(got, naive_response(p, size))

    def test_matches_naive_oracle_on_real_plane(self):
        p = np.random.default_rng(1).random((64, 64))
        got = hessian_response(integral_image(p), 9)
        np.testing.assert_allclose(got, naive_response(p, 9), atol=1e-12)

    def test_step_subsamples(self):
        p = np.random.default_rng(2).random((50, 50))
        ii = integral_image(p)
        np.testing.assert_array_equal(hessian_response(ii, 9, 2), hessian_response(ii, 9)[::2, ::2])

    def test_blob_peak_agrees_with_gaussian_derivatives(self):
        p = blob((41, 41), [(20.3, 19.6)], 1.2)
        resp = hessian_response(integral_image(p), 9)
        peak = np.unravel_index(np.argmax(resp), resp.shape)
        # exact second-order Gaussian derivatives at the filter's scale
        s = filter_scale(9)
        lxx = ndimage.gaussian_filter(p, s, order=(0, 2))
        lyy = ndimage.gaussian_filter(p, s, order=(2, 0))
        lxy = ndimage.gaussian_filter(p, s, order=(1, 1))
        ref = lxx * lyy - lxy**2
        ref_peak = np.unravel_index(np.argmax(ref), ref.shape)
        assert resp[peak] > 0
        assert abs(peak[0] - 20.3) <= 1 and abs(peak[1] - 19.6) <= 1
        assert max(abs(peak[0] - ref_peak[0]), abs(peak[1] - ref_peak[1])) <= 1


class TestDetect:
    cfg = HessianConfig(threshold=1e-3)

    def test_constant_and_infinite_threshold(self):
        assert detect_keypoints(np.full((128, 128), 0.5)) == []
        assert detect_keypoints(np.full((128, 128), 0.37), HessianConfig(threshold=0.0)) == []
        p = blob((128, 128), [(64, 64)], 2.5)
        assert detect_keypoints(p, HessianConfig(threshold=math.inf)) == []

    def test_too_small(self):
        assert detect_keypoints(np.random.default_rng(0).random((12, 12)), self.cfg) == []

    def test_two_blobs(self):
        centres = [(60.0, 50.0), (70.0, 140.0)]
        p = blob((128, 192), centres, 2.5)
        kps = detect_keypoints(p, self.cfg)
        assert len(kps) == 2
        for cy, cx in centres:
            assert any(abs(k.x - cx) <= 2 and abs(k.y - cy) <= 2 for k in kps)
        for k in kps:
            assert k.response >= self.cfg.threshold

    def test_blob_scale_tracks_size(self):
        small = detect_keypoints(blob((160, 160), [(80, 80)], 2.5), self.cfg)
        large = detect_keypoints(blob((160, 160), [(80, 80)], 6.0), self.cfg)
        assert len(small) == 1 and len(large) == 1
        assert large[0].scale > small[0].scale

    @pytest.mark.parametrize("refine", [True, False])
    def test_strict_maxima_over_26_neighbours(self, refine):
        rng = np.random.default_rng(3)
        p = ndimage.gaussian_filter(rng.random((160, 160)), 2.0)
        cfg = HessianConfig(threshold=1e-6, refine=refine)
        kps = detect_keypoints(p, cfg)
        assert kps
        ii = centred_integral(p)
        stacks = {}
        for k in kps:
            if k.octave not in stacks:
                stacks[k.octave] = response_stack(ii, cfg, k.octave)
            s = stacks[k.octave]
            cube = s[k.layer - 1:k.layer + 2, k.row - 1:k.row + 2, k.col - 1:k.col + 2].copy()
            centre = cube[1, 1, 1]
            assert centre == k.response
            cube[1, 1, 1] = -np.inf
            assert np.all(centre > cube)
            if not refine:
                assert k.x == k.col * cfg.step(k.octave)
                assert k.y == k.row * cfg.step(k.octave)


class TestOrientation:
    @staticmethod
    def corner(n=96):
        yy, xx = np.mgrid[0:n, 0:n].astype(float)
        p = ((xx > n / 2) & (yy > n / 2)).astype(float) + 0.3 * (xx > n / 2)
        return ndimage.gaussian_filter(p, 1.5)

    def test_rotation_by_quarter_turn(self):
        p = self.corner()
        n = p.shape[0]
        x = y = n / 2
        a = assign_orientations(integral_image(p), [x], [y], [2.0])[0]
        # np.rot90: new[i, j] = old[j, n-1-i], so the point maps to (x', y') = (y, n-1-x)
        q = np.rot90(p)
        b = assign_orientations(integral_image(q), [y], [n - 1 - x], [2.0])[0]
        diff = (a - b - math.pi / 2 + math.pi) % (2 * math.pi) - math.pi
        assert abs(diff) <= math.radians(5)

    def test_deterministic_and_in_range(self):
        p = blob((96, 96), [(48, 48)], 4.0) + 0.2 * blob((96, 96), [(40, 55)], 2.0)
        ii = integral_image(p)
        kp = Keypoint(48.0, 48.0, 2.0)
        a, b = assign_orientation(ii, kp), assign_orientation(ii, kp)
        assert a == b
        assert 0 <= a < 2 * math.pi

    @pytest.mark.parametrize("value", [0.4, 0.5, 7.0])
    def test_flat_support_is_zero(self, value):
        flat = np.full((80, 80), value)
        assert assign_orientation(integral_image(flat), Keypoint(40, 40, 2.0)) == 0.0

    def test_without_support_is_upright(self):
        p = self.corner()
        assert assign_orientation(integral_image(p), Keypoint(5.0, 5.0, 2.0)) == 0.0

    def test_ramp_direction(self):
        yy, xx = np.mgrid[0:80, 0:80].astype(float)
        ii = integral_image(0.01 * yy)
        assert assign_orientation(ii, Keypoint(40, 40, 1.5)) == pytest.approx(math.pi / 2, abs=1e-9)
        ii = integral_image(-0.01 * xx)
        assert assign_orientation(ii, Keypoint(40, 40, 1.5)) == pytest.approx(math.pi, abs=1e-9)


class TestDescribe:
    @staticmethod
    def textured(seed=0, n=96):
        rng = np.random.default_rng(seed)
        return np.round(ndimage.gaussian_filter(rng.random((n, n)), 2.0) * 1000.0)

    def test_unit_norm(self):
        ii = integral_image(self.textured())
        for theta in (0.0, 0.7, 3.0):
            d = describe(ii, Keypoint(48.0, 48.0, 1.6, theta))
            assert d.shape == (64,)
            assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("value", [3.0, 0.4])
    def test_flat_is_null(self, value):
        assert describe(integral_image(np.full((96, 96), value)), Keypoint(48, 48, 1.6)) is None

    def test_brightness_shift_exact(self):
        p = self.textured(1)
        kp = Keypoint(47.0, 49.0, 1.6, 1.1)
        a = describe(integral_image(p), kp)
        b = describe(integral_image(p + 37.0), kp)
        np.testing.assert_array_equal(a, b)

    def test_contrast_scale(self):
        p = self.textured(2) / 1000.0
        kp = Keypoint(48.0, 48.0, 2.0, 0.4)
        np.testing.assert_allclose(describe(integral_image(3.0 * p), kp), describe(integral_image(p), kp), atol=1e-9)

    def test_upright_ignores_orientation(self):
        ii = integral_image(self.textured(3))
        a = describe(ii, Keypoint(48, 48, 1.6, 2.0), upright=True)
        b = describe(ii, Keypoint(48, 48, 1.6, 0.0))
        np.testing.assert_array_equal(a, b)

    def test_layout_on_horizontal_ramp(self):
        # gradient along +x only: every dx sum positive, every dy sum zero
        yy, xx = np.mgrid[0:96, 0:96].astype(float)
        d = describe(integral_image(xx), Keypoint(48, 48, 1.6)).reshape(16, 4)
        assert np.all(d[:, 0] > 0)
        np.testing.assert_array_equal(d[:, 1], 0.0)
        np.testing.assert_allclose(d[:, 0], d[:, 2])


def rgb(planes):
    return RgbImage(*planes)


class TestSparse:
    def test_rows_and_channel_concatenation(self):
        r = blob((128, 128), [(40, 40), (90, 80)], 2.5)
        g = blob((128, 128), [(64, 64)], 3.0)
        b = np.zeros((128, 128))
        cfg = HessianConfig(threshold=1e-3)
        fm = sparse_surf(rgb((r, g, b)), cfg)
        assert fm.kind is Kind.SURF and fm.dim == 64
        counts = [surf_plane(p, cfg).shape[1] for p in (r, g, b)]
        assert counts[2] == 0
        assert fm.count == sum(counts) == 3
        np.testing.assert_array_equal(fm.data[:, :2], surf_plane(r, cfg))
        np.testing.assert_allclose(np.linalg.norm(fm.data, axis=0), 1.0, atol=1e-9)

    def test_constant_image(self):
        with pytest.raises(NoDescriptorsError):
            sparse_surf(rgb([np.full((128, 128), 0.5)] * 3))


class TestDense:
    @staticmethod
    def oracle_count(n, cell=16, sigma=DENSE_SIGMA):
        """Cells whose every Haar box lies inside ``[0, n)``."""
        half = 2 * max(1, math.floor(sigma + 0.5)) // 2
        offs = [math.floor((t - 9.5) * sigma + 0.5) for t in range(20)]
        good = 0
        for c in range(cell // 2, n, cell):
            lo = c + min(offs) - half
            hi = c + max(offs) + half - 1
            good += lo >= 0 and hi <= n - 1
        return good

    def test_grid_count_512(self):
        ys, xs = dense_centres(512, 512)
        assert ys.size == self.oracle_count(512) ** 2 == 900
        assert ys.size <= 32 * 32

    @pytest.mark.parametrize("h, w", [(64, 64), (100, 37), (512, 574)])
    def test_grid_count_other(self, h, w):
        ys, xs = dense_centres(h, w)
        assert ys.size == self.oracle_count(h) * self.oracle_count(w)

    def test_stacking_order(self):
        rng = np.random.default_rng(4)
        planes = [ndimage.gaussian_filter(rng.random((96, 96)), 1.5) for _ in range(3)]
        fm = dense_surf(rgb(planes))
        assert fm.kind is Kind.DSURF and fm.dim == 192
        ys, xs = dense_centres(96, 96)
        assert fm.count == ys.size
        for c, p in enumerate(planes):
            ii = integral_image(p)
            d = describe(ii, Keypoint(float(xs[0]), float(ys[0]), DENSE_SIGMA), upright=True)
            np.testing.assert_allclose(fm.data[64 * c:64 * (c + 1), 0], d, atol=1e-12)

    def test_null_in_any_channel_dropped(self):
        rng = np.random.default_rng(5)
        tex = ndimage.gaussian_filter(rng.random((96, 96)), 1.5)
        blue = tex.copy()
        blue[:48] = 0.0  # flat top half
        fm = dense_surf(rgb((tex, tex, blue)))
        full = dense_surf(rgb((tex, tex, tex)))
        assert 0 < fm.count < full.count

    def test_all_black(self):
        with pytest.raises(NoDescriptorsError):
            dense_surf(rgb([np.zeros((96, 96))] * 3))

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        img = rgb([rng.random((80, 80)) for _ in range(3)])
        np.testing.assert_array_equal(dense_surf(img).data, dense_surf(img).data)
