"""Pinhole cameras and EWA projection of conditional 3D Gaussians.

Conventions: the extrinsic maps world to view coordinates, the camera looks
down +z, image origin is the top-left corner and pixel centers sit at
integer + 0.5.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core4d import Conditional3D, eval_sh_color, sigmoid
from .errors import InvalidParameterError

DEFAULT_DILATION = 0.3
DEFAULT_NEAR = 0.01
SIGMA_EXTENT = 3.0


@dataclass
class Camera:
    """Pinhole camera with world-to-view extrinsics.

    Attributes:
        fx, fy, cx, cy: intrinsics in pixels.
        rotation: (3, 3) world-to-view rotation.
        translation: (3,) world-to-view translation.
        width, height: image size in pixels.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.fx, self.fy, self.cx, self.cy = map(float, (self.fx, self.fy, self.cx, self.cy))
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image size must be positive")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-9:
            raise InvalidParameterError("extrinsic rotation is not orthogonal")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def world_to_view(self) -> np.ndarray:
        """(3, 4) extrinsic matrix [R | t]."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def to_view(self, x_world: np.ndarray) -> np.ndarray:
        return np.asarray(x_world, dtype=np.float64) @ self.rotation.T + self.translation

    def with_resolution(self, width: int, height: int) -> "Camera":
        sx, sy = width / self.width, height / self.height
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      self.rotation, self.translation, width, height)


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    temporal_weight: float
    color: np.ndarray
    opacity: float


def project_point(cam: Camera, x_world, near: float = DEFAULT_NEAR):
    """Pixel position and depth of a world point, or ``None`` if culled."""
    xv, yv, zv = cam.to_view(x_world)
    if zv <= near:
        return None
    uv = np.array([cam.fx * xv / zv + cam.cx, cam.fy * yv / zv + cam.cy])
    return uv, float(zv)


def projection_jacobian(cam: Camera, x_view, near: float = DEFAULT_NEAR):
    """Jacobian of the perspective map at a view-space point, or ``None``."""
    x, y, z = np.asarray(x_view, dtype=np.float64)
    if z <= near:
        return None
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def splat_outside_image(mean2d, cov2d, width, height) -> np.ndarray:
    """True where the 3-sigma bounding box misses the image rectangle."""
    mean2d = np.asarray(mean2d)
    cov2d = np.asarray(cov2d)
    ex = SIGMA_EXTENT * np.sqrt(cov2d[..., 0, 0])
    ey = SIGMA_EXTENT * np.sqrt(cov2d[..., 1, 1])
    u, v = mean2d[..., 0], mean2d[..., 1]
    return (u + ex < 0) | (u - ex > width) | (v + ey < 0) | (v - ey > height)


def project_gaussian(
    cam: Camera,
    cond: Conditional3D,
    sh_coeffs,
    opacity_logit: float,
    dilation: float = DEFAULT_DILATION,
    near: float = DEFAULT_NEAR,
):
    """EWA-project one conditional Gaussian; ``None`` when culled."""
    projected = project_point(cam, cond.mean, near)
    if projected is None:
        return None
    mean2d, depth = projected
    J = projection_jacobian(cam, cam.to_view(cond.mean), near)
    T = J @ cam.rotation
    cov2d = T @ cond.cov @ T.T + dilation * np.eye(2)
    cov2d = 0.5 * (cov2d + cov2d.T)
    if splat_outside_image(mean2d, cov2d, cam.width, cam.height):
        return None
    direction = cond.mean - cam.center
    color = eval_sh_color(sh_coeffs, direction / np.linalg.norm(direction))
    return Splat2D(mean2d, cov2d, depth, cond.temporal_weight, color,
                   float(sigmoid(opacity_logit)))


def sort_by_depth(splats) -> np.ndarray:
    """Stable ascending depth order; accepts splats or plain depths."""
    depths = [s.depth if isinstance(s, Splat2D) else s for s in splats]
    return np.argsort(np.asarray(depths, dtype=np.float64), kind="stable")


# ---------------------------------------------------------------------------
# Batched projection for the rasterizer
# ---------------------------------------------------------------------------


@dataclass
class ProjectionCache:
    view: np.ndarray
    jac: np.ndarray
    transform: np.ndarray
    cov3: np.ndarray
    in_front: np.ndarray


def project_batch(cam: Camera, mean3, cov3, dilation=DEFAULT_DILATION, near=DEFAULT_NEAR):
    """Project N conditional Gaussians.

    Returns (mean2d (N,2), cov2d (N,2,2), depth (N,), cache). Rows with
    ``cache.in_front == False`` hold placeholder values and must be culled.
    """
    view = cam.to_view(mean3)
    depth = view[:, 2]
    in_front = depth > near
    z = np.where(in_front, depth, 1.0)
    x, y = view[:, 0], view[:, 1]
    n = mean3.shape[0]
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / (z * z)
    transform = jac @ cam.rotation
    cov2d = transform @ cov3 @ np.swapaxes(transform, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    return mean2d, cov2d, depth, ProjectionCache(view, jac, transform, cov3, in_front)


def project_batch_backward(cam: Camera, cache: ProjectionCache, g_mean2d, g_cov2d):
    """Pull gradients on (mean2d, symmetric cov2d) back to (mean3, cov3)."""
    g_cov2d = 0.5 * (g_cov2d + np.swapaxes(g_cov2d, 1, 2))
    T = cache.transform
    g_cov3 = np.swapaxes(T, 1, 2) @ g_cov2d @ T
    g_T = 2.0 * g_cov2d @ T @ cache.cov3
    g_J = g_T @ cam.rotation.T

    x, y, z = cache.view[:, 0], cache.view[:, 1], np.where(cache.in_front, cache.view[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    z2, z3 = z * z, z * z * z
    g_view = np.zeros_like(cache.view)
    # mean2d = (fx x / z + cx, fy y / z + cy)
    g_view[:, 0] = g_mean2d[:, 0] * fx / z
    g_view[:, 1] = g_mean2d[:, 1] * fy / z
    g_view[:, 2] = -g_mean2d[:, 0] * fx * x / z2 - g_mean2d[:, 1] * fy * y / z2
    # J entries depend on the view point too
    g_view[:, 0] += -g_J[:, 0, 2] * fx / z2
    g_view[:, 1] += -g_J[:, 1, 2] * fy / z2
    g_view[:, 2] += (
        -g_J[:, 0, 0] * fx / z2
        + g_J[:, 0, 2] * 2.0 * fx * x / z3
        - g_J[:, 1, 1] * fy / z2
        + g_J[:, 1, 2] * 2.0 * fy * y / z3
    )
    g_mean3 = g_view @ cam.rotation
    mask = cache.in_front[:, None]
    return g_mean3 * mask, g_cov3 * mask[:, :, None]
