import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import alpha_bar_loop, patch_loop

from patchattr.core import (
    Dataset,
    ImageTensor,
    build_schedule,
    downsample,
    extract_patch,
    forward_noise,
    gaussian_noise,
    noise_image,
    patch_offset,
    unfold_patches,
)
from patchattr.exceptions import ConfigurationError, DataFormatError, LookupFailure, ShapeError


class TestSchedule:
    def test_default_matches_scalar_loop(self):
        s = build_schedule(1000, 1e-4, 0.02)
        want = alpha_bar_loop(1000, 1e-4, 0.02)
        np.testing.assert_allclose(s.alpha_bars, want, rtol=1e-12)
        assert s.abar(1000) == pytest.approx(4.04e-5, rel=2e-3)

    def test_single_step(self):
        assert build_schedule(1, 0.5, 0.5).abar(1) == 0.5

    def test_two_steps(self):
        assert build_schedule(2, 0.1, 0.1).abar(2) == pytest.approx(0.81, abs=1e-15)

    def test_abar_zero_is_one(self, schedule):
        assert schedule.abar(0) == 1.0

    def test_linear_betas(self, schedule):
        assert schedule.betas[0] == 1e-4
        assert schedule.betas[-1] == pytest.approx(0.02, abs=1e-15)
        assert np.all(np.diff(schedule.betas) >= 0)

    def test_monotone(self, schedule):
        assert np.all(np.diff(schedule.alpha_bars) < 0)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
    def test_bad_bounds(self, args):
        with pytest.raises(ConfigurationError):
            build_schedule(*args)

    def test_timestep_range(self, schedule):
        with pytest.raises(ConfigurationError):
            schedule.check_timestep(1001)
        with pytest.raises(ConfigurationError):
            noise_image(np.zeros((1, 2, 2)), 0, schedule)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 2000), st.floats(1e-5, 0.05), st.floats(0.0, 0.3))
    def test_running_product(self, T, lo, extra):
        hi = min(lo + extra, 0.9)
        s = build_schedule(T, lo, hi)
        np.testing.assert_allclose(s.alpha_bars, np.cumprod(s.alphas), rtol=1e-12)
        assert np.all(np.diff(s.alpha_bars) < 0)


class TestNoise:
    def test_zero_mode_scales(self):
        s = build_schedule(2, 0.1, 0.1)
        x = np.random.default_rng(0).uniform(-1, 1, (3, 4, 4))
        n = noise_image(x, 2, s, "zero")
        np.testing.assert_allclose(n.x_t, 0.9 * x, rtol=1e-15)
        assert n.epsilon is None

    def test_seeded_repeatable(self, schedule):
        x = np.zeros((3, 4, 4))
        a = noise_image(x, 10, schedule, seed=5, image_id="img")
        b = noise_image(x, 10, schedule, seed=5, image_id="img")
        assert a.x_t.tobytes() == b.x_t.tobytes()

    def test_streams_differ_by_key(self, schedule):
        x = np.zeros((3, 4, 4))
        base = noise_image(x, 10, schedule, seed=5, image_id="img").x_t
        for kw in (dict(seed=6, image_id="img"), dict(seed=5, image_id="other")):
            assert not np.array_equal(base, noise_image(x, 10, schedule, **kw).x_t)
        assert not np.array_equal(base, noise_image(x, 11, schedule, seed=5, image_id="img").x_t)
        assert not np.array_equal(base, noise_image(x, 10, schedule, seed=5, image_id="img", draw=1).x_t)

    def test_shared_across_timesteps(self, schedule):
        x = np.zeros((1, 3, 3))
        a = noise_image(x, 10, schedule, seed=1, image_id="i", shared_across_t=True)
        b = noise_image(x, 400, schedule, seed=1, image_id="i", shared_across_t=True)
        np.testing.assert_array_equal(a.epsilon, b.epsilon)

    def test_closed_form(self, schedule):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, (3, 5, 5))
        n = noise_image(x, 250, schedule, seed=2, image_id="q")
        abar = schedule.abar(250)
        np.testing.assert_array_equal(n.x_t, np.sqrt(abar) * x + np.sqrt(1 - abar) * n.epsilon)

    def test_monte_carlo_moments(self, schedule):
        T = schedule.T
        abar = schedule.abar(T)
        draws = np.array([noise_image(np.zeros((1, 1, 1)), T, schedule, seed=0, image_id="mc", draw=d).x_t[0, 0, 0]
                          for d in range(10_000)])
        sd = np.sqrt(1 - abar)
        assert abs(draws.mean()) <= 3 * sd / np.sqrt(draws.size)
        assert draws.var() == pytest.approx(1 - abar, rel=0.05)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-3, 3), st.integers(1, 1000))
    def test_linearity(self, a, t):
        s = build_schedule()
        rng = np.random.default_rng(t)
        x = rng.uniform(-1, 1, (2, 3, 3))
        eps = gaussian_noise(x.shape, 0, "lin", t)
        abar = s.abar(t)
        np.testing.assert_allclose(forward_noise(a * x, abar, eps), np.sqrt(abar) * a * x + np.sqrt(1 - abar) * eps,
                                   rtol=1e-12, atol=1e-15)

    def test_unknown_mode(self, schedule):
        with pytest.raises(ConfigurationError):
            noise_image(np.zeros((1, 2, 2)), 5, schedule, "gaussian")


class TestPatches:
    def test_interior_is_full_image(self):
        img = np.arange(9.0).reshape(1, 3, 3)
        np.testing.assert_array_equal(extract_patch(img, (1, 1), 3).values, img)

    def test_corner_padding(self):
        img = np.arange(1.0, 10.0).reshape(1, 3, 3)
        p = extract_patch(img, (0, 0), 3).values[0]
        np.testing.assert_array_equal(p, [[0, 0, 0], [0, 1, 2], [0, 4, 5]])

    def test_single_pixel(self):
        v = extract_patch(np.array([[[0.25]]]), (0, 0), 1)
        assert v.values.shape == (1, 1, 1)
        np.testing.assert_array_equal(v.center_pixel, [0.25])

    def test_even_patch_center(self):
        img = np.arange(16.0).reshape(1, 4, 4)
        p = extract_patch(img, (2, 1), 4)
        assert patch_offset(4) == 1
        np.testing.assert_array_equal(p.center_pixel, img[:, 2, 1])

    def test_errors(self):
        with pytest.raises(ShapeError):
            extract_patch(np.zeros((1, 3, 3)), (3, 0), 3)
        with pytest.raises(ConfigurationError):
            extract_patch(np.zeros((1, 3, 3)), (0, 0), 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 8), st.integers(1, 3), st.data())
    def test_matches_loop_and_center(self, P, L, C, data):
        rng = np.random.default_rng(P * 100 + L)
        img = rng.uniform(-1, 1, (C, L, L))
        r = data.draw(st.integers(0, L - 1))
        c = data.draw(st.integers(0, L - 1))
        v = extract_patch(img, (r, c), P)
        np.testing.assert_array_equal(v.values, patch_loop(img.tolist(), r, c, P))
        o = patch_offset(P)
        np.testing.assert_array_equal(v.values[:, o, o], img[:, r, c])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 9))
    def test_tiling(self, P, L):
        img = np.ones((1, L, L))
        cover = np.zeros((L, L))
        o = patch_offset(P)
        for r in range(L):
            for c in range(L):
                v = extract_patch(img, (r, c), P).values[0]
                for i in range(P):
                    for j in range(P):
                        y, x = r - o + i, c - o + j
                        if 0 <= y < L and 0 <= x < L:
                            assert v[i, j] == 1.0
                            cover[y, x] += 1
                        else:
                            assert v[i, j] == 0.0
        h = P // 2
        interior = cover[h:L - h, h:L - h]
        assert np.all(interior == P * P)

    def test_unfold_matches_extract(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(-1, 1, (2, 5, 5))
        for P in (1, 2, 3, 4):
            u = unfold_patches(img, P)
            for r in range(5):
                for c in range(5):
                    np.testing.assert_array_equal(u[r, c], extract_patch(img, (r, c), P).values)


class TestDownsample:
    def test_mean(self):
        np.testing.assert_array_equal(downsample(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2), [[[2.5]]])

    def test_identity(self):
        p = np.random.default_rng(0).uniform(size=(3, 5, 5))
        np.testing.assert_array_equal(downsample(p, 1), p)

    def test_trailing_dropped(self):
        np.testing.assert_array_equal(downsample(np.ones((1, 3, 3)), 2), [[[1.0]]])

    def test_too_small(self):
        with pytest.raises(ShapeError):
            downsample(np.ones((1, 1, 1)), 2)
        with pytest.raises(ConfigurationError):
            downsample(np.ones((1, 2, 2)), 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 12), st.integers(0, 2**31))
    def test_mean_preserving(self, w, P, seed):
        if P < w:
            return
        p = np.random.default_rng(seed).normal(size=(2, P, P))
        m = (P // w) * w
        assert downsample(p, w).mean() == pytest.approx(p[:, :m, :m].mean(), abs=1e-6)


class TestDataset:
    def test_defaults_and_lookup(self):
        ds = Dataset(np.zeros((3, 1, 2, 2)))
        assert ds.ids == ("0", "1", "2")
        assert (ds.size, ds.channels, ds.side) == (3, 1, 2)
        assert ds.index_of("2") == 2
        with pytest.raises(LookupFailure):
            ds.index_of("9")

    def test_duplicate_ids(self):
        with pytest.raises(DataFormatError):
            Dataset(np.zeros((2, 1, 2, 2)), ["a", "a"])

    def test_shape_checks(self):
        with pytest.raises(ShapeError):
            Dataset(np.zeros((2, 1, 2, 3)))
        with pytest.raises(ShapeError):
            Dataset(np.zeros((2, 1, 2, 2)), ["a"])
        with pytest.raises(ShapeError):
            ImageTensor(np.zeros((2, 2)))

    def test_range_check_names_index(self):
        Dataset(np.full((1, 1, 2, 2), 0.5)).check_range()
        bad = Dataset(np.array([0.5, 0.5, 0.5, 1.5]).reshape(1, 1, 2, 2))
        with pytest.raises(DataFormatError, match="index 3"):
            bad.check_range()

    def test_immutable(self):
        ds = Dataset(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            ds.images[0, 0, 0, 0] = 1.0

    def test_from_images_and_subset(self):
        ims = [ImageTensor(np.full((1, 2, 2), v)) for v in (0.1, 0.2, 0.3)]
        ds = Dataset.from_images(ims, ["a", "b", "c"])
        sub = ds.subset([2, 0])
        assert sub.ids == ("c", "a")
        np.testing.assert_array_equal(sub[0].data, ims[2].data)
        with pytest.raises(ShapeError):
            Dataset.from_images([ImageTensor(np.zeros((1, 2, 2))), ImageTensor(np.zeros((1, 3, 3)))])
