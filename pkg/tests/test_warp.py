import numpy as np
import pytest

from depthmotion import diffengine as de
from depthmotion.geometry import Intrinsics
from depthmotion.warp import bilinear_sample, inverse_warp, motion_matrix


def bilinear_texture(k: Intrinsics) -> np.ndarray:
    """A field that bilinear interpolation reproduces exactly."""
    xs, ys = k.pixel_grid()
    r = 0.1 + 0.02 * xs + 0.01 * ys + 0.001 * xs * ys
    g = 0.5 - 0.015 * xs + 0.004 * ys
    b = 0.3 + 0.0005 * xs * ys
    return np.stack([r, g, b], axis=-1)


class TestBilinearSample:
    def test_integer_location(self):
        img = np.arange(12.0).reshape(3, 4)
        val, inside = bilinear_sample(img, 2.0, 1.0)
        assert val[0] == 6.0 and inside

    def test_midpoint(self):
        img = np.array([[0.0, 1.0]] * 2)
        val, _ = bilinear_sample(img, 0.5, 0.0)
        assert val[0] == 0.5

    def test_out_of_bounds_flag(self):
        img = np.ones((3, 3))
        _, inside = bilinear_sample(img, 2.5, 1.0)
        assert not inside

    def test_random_points_against_four_neighbours(self):
        rng = np.random.default_rng(0)
        img = rng.random((6, 8, 3))
        for x, y in rng.uniform([0, 0], [7, 5], (20, 2)):
            x0, y0 = int(x), int(y)
            ax, ay = x - x0, y - y0
            ref = ((1 - ax) * (1 - ay) * img[y0, x0] + ax * (1 - ay) * img[y0, x0 + 1]
                   + (1 - ax) * ay * img[y0 + 1, x0] + ax * ay * img[y0 + 1, x0 + 1])
            val, inside = bilinear_sample(img, x, y)
            np.testing.assert_allclose(val, ref, atol=1e-14)
            assert inside


class TestInverseWarp:
    def test_identity_motion(self):
        k = Intrinsics.centered(10, 8, 9.0)
        src = np.random.default_rng(1).random((8, 10, 3))
        res = inverse_warp(src, np.full(k.shape, 3.0), np.zeros(6), k)
        np.testing.assert_allclose(res.image, src, atol=1e-12)
        assert res.validity.all()

    def test_lateral_translation_is_a_shift(self):
        k = Intrinsics.centered(24, 16, 20.0)
        d, tx = 6.0, 0.219
        shift = k.fx * tx / d
        src = bilinear_texture(k)
        res = inverse_warp(src, np.full(k.shape, d), np.array([tx, 0, 0, 0, 0, 0]), k)
        xs, ys = k.pixel_grid()
        r = 0.1 + 0.02 * (xs + shift) + 0.01 * ys + 0.001 * (xs + shift) * ys
        g = 0.5 - 0.015 * (xs + shift) + 0.004 * ys
        b = 0.3 + 0.0005 * (xs + shift) * ys
        expected = np.stack([r, g, b], axis=-1)
        interior = xs + shift <= k.width - 1
        np.testing.assert_allclose(res.image[interior], expected[interior], atol=1e-5)
        np.testing.assert_array_equal(res.validity, interior)

    def test_integer_shift_on_smooth_texture(self):
        k = Intrinsics.centered(20, 12, 10.0)
        xs, ys = k.pixel_grid()
        src = (0.5 + 0.3 * np.sin(0.4 * xs) * np.cos(0.3 * ys))[..., None]
        res = inverse_warp(src, np.full(k.shape, 5.0), np.array([1.0, 0, 0, 0, 0, 0]), k)
        np.testing.assert_allclose(res.image[:, :-2], src[:, 2:], atol=1e-12)

    def test_behind_camera_is_invalid(self):
        k = Intrinsics.centered(6, 6, 5.0)
        res = inverse_warp(np.ones((6, 6, 3)), np.full(k.shape, 2.0), np.array([0, 0, -10.0, 0, 0, 0]), k)
        assert not res.validity.any()

    def test_accepts_matrix_and_checks_shapes(self):
        k = Intrinsics.centered(6, 6, 5.0)
        src = np.random.default_rng(2).random((6, 6, 3))
        p = np.array([0.1, 0.05, 0.0, 0.01, 0.0, 0.02])
        a = inverse_warp(src, np.full(k.shape, 4.0), p, k)
        b = inverse_warp(src, np.full(k.shape, 4.0), motion_matrix(p), k)
        np.testing.assert_array_equal(a.image, b.image)
        with pytest.raises(de.ContractError):
            inverse_warp(src, np.full((5, 6), 4.0), p, k)
        with pytest.raises(de.ContractError):
            motion_matrix(np.zeros(5))

    def test_gradients_through_depth_and_pose(self):
        k = Intrinsics.centered(10, 10, 8.0)
        xs, ys = k.pixel_grid()
        src = np.stack([0.5 + 0.2 * np.sin(0.5 * xs + 0.3 * ys), 0.4 + 0.1 * np.cos(0.4 * ys)], axis=-1)
        src = np.concatenate([src, src[..., :1]], axis=-1)
        ps = de.ParamSet({"logd": np.log(4.0) + 0.01 * xs + 0.007 * ys,
                          "pose": np.array([0.13, -0.07, 0.0, 0.002, -0.001, 0.003])})
        f = lambda v: de.sum_(inverse_warp(src, de.exp(v["logd"]), v["pose"], k).image)
        assert de.grad_check(f, ps, n=60, rng=np.random.default_rng(0)) < 1e-5
