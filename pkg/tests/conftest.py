import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", message=".*TBB threading layer.*")

from splat4d.core4d import Gaussian4D, GaussianScene, sh_coeff_count  # noqa: E402
from splat4d.projection import Camera  # noqa: E402


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_gaussian(rng, sh_degree=0):
    return Gaussian4D(
        mu=np.concatenate([rng.uniform(-0.5, 0.5, 3), rng.uniform(0, 1, 1)]),
        log_scale=rng.uniform(-2.0, 0.5, 4),
        rot_left=random_quat(rng),
        rot_right=random_quat(rng),
        opacity_logit=rng.normal(),
        sh_coeffs=rng.normal(scale=0.5, size=(sh_coeff_count(sh_degree), 3)),
    )


def random_scene(rng, n, sh_degree=0, spatial=(-3.5, -2.0), temporal=(-1.0, 0.0), extent=0.4):
    """Small visible Gaussians in front of :func:`front_camera`."""
    return GaussianScene(
        mu=np.concatenate([rng.uniform(-extent, extent, (n, 3)), rng.uniform(0.2, 0.8, (n, 1))], 1),
        log_scale=np.concatenate([rng.uniform(*spatial, (n, 3)), rng.uniform(*temporal, (n, 1))], 1),
        rot_left=np.array([random_quat(rng) for _ in range(n)]),
        rot_right=np.array([random_quat(rng) for _ in range(n)]),
        opacity_logit=rng.normal(0.0, 1.0, n),
        sh_coeffs=rng.normal(scale=0.5, size=(n, sh_coeff_count(sh_degree), 3)),
    )


def front_camera(width=32, height=32, distance=2.0, fov_px=None):
    """Camera at (0, 0, -distance) looking along +z with identity rotation."""
    f = fov_px if fov_px is not None else 1.1 * width
    return Camera(f, f, width / 2, height / 2, np.eye(3), [0.0, 0.0, distance], width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check_scene(scene, loss, grads, rng, samples_per_group, h=1e-5, rtol=1e-3, atol=1e-6):
    """Compare analytic gradients to central differences of ``loss(scene)``.

    Returns a list of (group, index, fd, analytic, ok) tuples.
    """
    results = []
    for name, arr in scene.params().items():
        analytic = getattr(grads, name)
        for _ in range(samples_per_group):
            idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
            plus, minus = scene.copy(), scene.copy()
            plus.params()[name][idx] += h
            minus.params()[name][idx] -= h
            fd = (loss(plus) - loss(minus)) / (2 * h)
            an = float(analytic[idx])
            ok = abs(fd - an) <= max(rtol * abs(fd), atol)
            results.append((name, idx, fd, an, ok))
    return results


def reference_render(scene, cam, t, background):
    """Per-pixel loop over scalar projections; no tiling, no batching."""
    from splat4d.core4d import build_covariance, condition_on_time
    from splat4d.projection import project_gaussian, sort_by_depth

    splats = []
    for g in scene:
        cov = build_covariance(g)
        if abs(t - g.mu[3]) > 6.0 * np.sqrt(cov.tt):
            continue
        s = project_gaussian(cam, condition_on_time(cov, g.mu, t), g.sh_coeffs, g.opacity_logit)
        if s is not None:
            splats.append(s)
    splats = [splats[k] for k in sort_by_depth(splats)]
    inv = [np.linalg.inv(s.cov2d) for s in splats]
    image = np.zeros((cam.height, cam.width, 3))
    for py in range(cam.height):
        for px in range(cam.width):
            p = np.array([px + 0.5, py + 0.5])
            T, c = 1.0, np.zeros(3)
            for s, K in zip(splats, inv):
                d = p - s.mean2d
                power = -0.5 * d @ K @ d
                if power < -4.5:
                    continue
                a = s.opacity * s.temporal_weight * np.exp(power)
                c += a * T * s.color
                T *= 1 - a
                if T < 1e-4:
                    break
            image[py, px] = c + T * np.asarray(background)
    return image


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
