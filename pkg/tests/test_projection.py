import numpy as np
import pytest

from splat4d.core4d import Conditional3D
from splat4d.projection import (
    Camera,
    project_batch,
    project_batch_backward,
    project_gaussian,
    project_point,
    projection_jacobian,
    sort_by_depth,
)
from splat4d.errors import InvalidParameterError

from conftest import random_quat


def axis_camera(f=100.0, c=32.0):
    return Camera(f, f, c, c, np.eye(3), np.zeros(3), 64, 64)


def random_camera(rng):
    q = random_quat(rng)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    return Camera(80, 90, 30, 34, R, rng.normal(size=3) + [0, 0, 4], 64, 64)


class TestCamera:
    def test_rejects_non_orthogonal(self):
        with pytest.raises(InvalidParameterError):
            Camera(1, 1, 0, 0, np.diag([1, 1, 1.01]), np.zeros(3), 4, 4)

    @pytest.mark.parametrize("f", [0.0, -1.0])
    def test_rejects_bad_focal(self, f):
        with pytest.raises(InvalidParameterError):
            Camera(f, 1, 0, 0, np.eye(3), np.zeros(3), 4, 4)

    def test_center_round_trip(self, rng):
        cam = random_camera(rng)
        np.testing.assert_allclose(cam.to_view(cam.center), 0, atol=1e-12)


class TestProjectPoint:
    @pytest.mark.parametrize("point, uv", [((0, 0, 2), (32, 32)), ((1, 0, 2), (82, 32))])
    def test_examples(self, point, uv):
        got, depth = project_point(axis_camera(), point)
        np.testing.assert_allclose(got, uv)
        assert depth == 2

    @pytest.mark.parametrize("z", [0.0, 0.01, -1.0])
    def test_behind_or_near_is_culled(self, z):
        assert project_point(axis_camera(), (0, 0, z)) is None
        assert projection_jacobian(axis_camera(), (0, 0, z)) is None

    def test_jacobian_examples(self):
        np.testing.assert_array_equal(projection_jacobian(axis_camera(1.0), (0, 0, 1)),
                                      [[1, 0, 0], [0, 1, 0]])
        np.testing.assert_array_equal(projection_jacobian(axis_camera(), (0, 0, 2)),
                                      [[50, 0, 0], [0, 50, 0]])

    def test_jacobian_matches_finite_differences(self, rng):
        cam = axis_camera()
        for _ in range(20):
            xv = rng.normal(size=3) + [0, 0, 3]
            h = 1e-4
            fd = np.stack([(project_point(cam, xv + h * e)[0] - project_point(cam, xv - h * e)[0])
                           / (2 * h) for e in np.eye(3)], 1)
            np.testing.assert_allclose(projection_jacobian(cam, xv), fd, atol=1e-5)


class TestProjectGaussian:
    def test_isotropic_on_axis(self):
        cam, sigma, z = axis_camera(), 0.05, 2.0
        cond = Conditional3D(np.array([0, 0, z]), sigma ** 2 * np.eye(3), 0.7)
        s = project_gaussian(cam, cond, np.zeros((1, 3)), 0.0)
        np.testing.assert_allclose(s.cov2d, ((100 * sigma / z) ** 2 + 0.3) * np.eye(2), rtol=1e-12)
        assert s.temporal_weight == 0.7
        assert s.depth == z
        assert s.opacity == 0.5

    def test_dilation_floor(self):
        cond = Conditional3D(np.array([0.1, -0.2, 2.0]), 1e-14 * np.eye(3), 1.0)
        s = project_gaussian(axis_camera(), cond, np.zeros((1, 3)), 0.0)
        np.testing.assert_allclose(s.cov2d, 0.3 * np.eye(2), atol=1e-9)

    def test_behind_camera_culled(self):
        cond = Conditional3D(np.array([0, 0, -1.0]), 0.01 * np.eye(3), 1.0)
        assert project_gaussian(axis_camera(), cond, np.zeros((1, 3)), 0.0) is None

    def test_off_screen_culled(self):
        cond = Conditional3D(np.array([10.0, 0, 2.0]), 1e-4 * np.eye(3), 1.0)
        assert project_gaussian(axis_camera(), cond, np.zeros((1, 3)), 0.0) is None

    def test_batch_matches_scalar(self, rng):
        cam = random_camera(rng)
        mean3 = rng.normal(scale=0.5, size=(10, 3))
        A = rng.normal(scale=0.1, size=(10, 3, 3))
        cov3 = A @ np.swapaxes(A, 1, 2)
        mean2d, cov2d, depth, _ = project_batch(cam, mean3, cov3)
        for i in range(10):
            uv, z = project_point(cam, mean3[i])
            np.testing.assert_allclose(mean2d[i], uv, rtol=1e-13)
            J = projection_jacobian(cam, cam.to_view(mean3[i]))
            T = J @ cam.rotation
            np.testing.assert_allclose(cov2d[i], T @ cov3[i] @ T.T + 0.3 * np.eye(2), rtol=1e-12)

    def test_batch_backward_matches_finite_differences(self, rng):
        cam = random_camera(rng)
        mean3 = rng.normal(scale=0.5, size=(3, 3))
        A = rng.normal(scale=0.1, size=(3, 3, 3))
        cov3 = A @ np.swapaxes(A, 1, 2)
        gm, gc = rng.normal(size=(3, 2)), rng.normal(size=(3, 2, 2))

        def f(m, c):
            m2, c2, _, _ = project_batch(cam, m, c)
            return np.sum(gm * m2) + np.sum(gc * c2)

        _, _, _, cache = project_batch(cam, mean3, cov3)
        g_mean, g_cov = project_batch_backward(cam, cache, gm, gc)
        h = 1e-6
        for i in range(3):
            for k in range(3):
                e = np.zeros_like(mean3)
                e[i, k] = h
                assert g_mean[i, k] == pytest.approx((f(mean3 + e, cov3) - f(mean3 - e, cov3)) / (2 * h),
                                                     rel=1e-6, abs=1e-8)
                e = np.zeros_like(cov3)
                e[i, k, (k + 1) % 3] = h
                assert g_cov[i, k, (k + 1) % 3] == pytest.approx(
                    (f(mean3, cov3 + e) - f(mean3, cov3 - e)) / (2 * h), rel=1e-6, abs=1e-8)


class TestSort:
    def test_example(self):
        np.testing.assert_array_equal(sort_by_depth([3.0, 1.0, 2.0]), [1, 2, 0])

    def test_ties_are_stable(self):
        np.testing.assert_array_equal(sort_by_depth([2.0, 1.0, 2.0, 1.0, 2.0]), [1, 3, 0, 2, 4])

    def test_large_random(self, rng):
        depths = rng.uniform(0, 10, 10_000)
        assert np.all(np.diff(depths[sort_by_depth(depths)]) >= 0)
