"""
Differentiable tile-based rasterizer for spacetime Gaussians.

The forward pass conditions every Gaussian on the render time, projects it,
sorts the survivors by depth and composites them front to back per pixel.
The backward pass replays exactly the same per-pixel decisions (3-sigma
ellipse cutoff, early termination) and then walks the per-Gaussian chain
back to the stored parameters.

Per-pixel work runs in numba kernels. Gradient accumulation goes into a
fixed number of per-partition buffers that are reduced in a fixed order, so
results do not depend on the thread count.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numba
import numpy as np
from numba import njit, prange

from .core4d import (
    TEMPORAL_VARIANCE_FLOOR,
    GaussianScene,
    condition_batch,
    condition_batch_backward,
    covariance_batch,
    covariance_batch_backward,
    sh_color_batch,
    sh_color_batch_backward,
    sigmoid,
)
from .errors import DegenerateTemporalError, InvalidParameterError, TimeRangeError
from .projection import (
    DEFAULT_DILATION,
    DEFAULT_NEAR,
    SIGMA_EXTENT,
    Camera,
    project_batch,
    project_batch_backward,
    splat_outside_image,
)

N_PARTITIONS = 16
# per splat: mean (2), conic (3), color (3), peak opacity (1)
_GRAD_WIDTH = 9


@dataclass
class RasterSettings:
    dilation: float = DEFAULT_DILATION
    near: float = DEFAULT_NEAR
    min_transmittance: float = 1e-4
    temporal_cutoff: float | None = 6.0
    screen_cull: bool = True
    tile_size: int = 16


@dataclass
class RenderOutput:
    image: np.ndarray
    alpha: np.ndarray
    n_contrib: np.ndarray


@dataclass
class ParamGradients:
    mu: np.ndarray
    log_scale: np.ndarray
    rot_left: np.ndarray
    rot_right: np.ndarray
    opacity_logit: np.ndarray
    sh_coeffs: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> "ParamGradients":
        return cls(**{k: np.zeros_like(v) for k, v in scene.params().items()})


def set_threads(n: int) -> None:
    """Cap the worker threads used by the pixel kernels."""
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _bin_tiles(means, extents, width, height, tile, tiles_x, tiles_y):
    n = means.shape[0]
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    rects = np.empty((n, 4), dtype=np.int64)
    for i in range(n):
        # pixel centers sit at integer + 0.5
        x0 = max(int(np.ceil(means[i, 0] - extents[i, 0] - 0.5)), 0)
        x1 = min(int(np.floor(means[i, 0] + extents[i, 0] - 0.5)), width - 1)
        y0 = max(int(np.ceil(means[i, 1] - extents[i, 1] - 0.5)), 0)
        y1 = min(int(np.floor(means[i, 1] + extents[i, 1] - 0.5)), height - 1)
        if x1 < x0 or y1 < y0:
            rects[i, 0] = 1
            rects[i, 1] = 0
            rects[i, 2] = 1
            rects[i, 3] = 0
            continue
        rects[i, 0] = x0 // tile
        rects[i, 1] = x1 // tile
        rects[i, 2] = y0 // tile
        rects[i, 3] = y1 // tile
        for ty in range(rects[i, 2], rects[i, 3] + 1):
            for tx in range(rects[i, 0], rects[i, 1] + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    entries = np.empty(offsets[-1], dtype=np.int64)
    for i in range(n):
        for ty in range(rects[i, 2], rects[i, 3] + 1):
            for tx in range(rects[i, 0], rects[i, 1] + 1):
                t = ty * tiles_x + tx
                entries[fill[t]] = i
                fill[t] += 1
    return offsets, entries


@njit(cache=True, parallel=True)
def _forward_kernel(means, conics, colors, opacs, offsets, entries, width, height,
                    tile, tiles_x, background, min_t, cutoff):
    n_tiles = offsets.shape[0] - 1
    image = np.empty((height, width, 3))
    alpha = np.empty((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int32)
    for tid in prange(n_tiles):
        ty = tid // tiles_x
        tx = tid - ty * tiles_x
        start = offsets[tid]
        stop = offsets[tid + 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                cnt = 0
                for e in range(start, stop):
                    i = entries[e]
                    dx = fx - means[i, 0]
                    dy = fy - means[i, 1]
                    power = -0.5 * (conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy
                                    + conics[i, 2] * dy * dy)
                    if power < cutoff:
                        continue
                    a = opacs[i] * np.exp(power)
                    w = a * T
                    r += w * colors[i, 0]
                    g += w * colors[i, 1]
                    b += w * colors[i, 2]
                    T = T * (1.0 - a)
                    cnt += 1
                    if T < min_t:
                        break
                image[py, px, 0] = r + T * background[0]
                image[py, px, 1] = g + T * background[1]
                image[py, px, 2] = b + T * background[2]
                alpha[py, px] = 1.0 - T
                n_contrib[py, px] = cnt
    return image, alpha, n_contrib


@njit(cache=True, parallel=True)
def _backward_kernel(means, conics, colors, opacs, offsets, entries, width, height,
                     tile, tiles_x, background, min_t, cutoff, d_image, n_parts):
    n_tiles = offsets.shape[0] - 1
    n = means.shape[0]
    buf = np.zeros((n_parts, n, 9))
    max_len = 0
    for tid in range(n_tiles):
        max_len = max(max_len, offsets[tid + 1] - offsets[tid])
    for part in prange(n_parts):
        out = buf[part]
        ids = np.empty(max_len, dtype=np.int64)
        gs = np.empty(max_len)
        avals = np.empty(max_len)
        Ts = np.empty(max_len)
        for tid in range(part, n_tiles, n_parts):
            ty = tid // tiles_x
            tx = tid - ty * tiles_x
            start = offsets[tid]
            stop = offsets[tid + 1]
            for py in range(ty * tile, min((ty + 1) * tile, height)):
                for px in range(tx * tile, min((tx + 1) * tile, width)):
                    fx = px + 0.5
                    fy = py + 0.5
                    dr = d_image[py, px, 0]
                    dg = d_image[py, px, 1]
                    db = d_image[py, px, 2]
                    if dr == 0.0 and dg == 0.0 and db == 0.0:
                        continue
                    T = 1.0
                    cnt = 0
                    for e in range(start, stop):
                        i = entries[e]
                        dx = fx - means[i, 0]
                        dy = fy - means[i, 1]
                        power = -0.5 * (conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy
                                        + conics[i, 2] * dy * dy)
                        if power < cutoff:
                            continue
                        gv = np.exp(power)
                        a = opacs[i] * gv
                        ids[cnt] = i
                        gs[cnt] = gv
                        avals[cnt] = a
                        Ts[cnt] = T
                        T = T * (1.0 - a)
                        cnt += 1
                        if T < min_t:
                            break
                    # colour of everything behind the current splat, seen from just after it
                    br = background[0]
                    bg = background[1]
                    bb = background[2]
                    for k in range(cnt - 1, -1, -1):
                        i = ids[k]
                        a = avals[k]
                        Ti = Ts[k]
                        cr = colors[i, 0]
                        cg = colors[i, 1]
                        cb = colors[i, 2]
                        ga = Ti * ((cr - br) * dr + (cg - bg) * dg + (cb - bb) * db)
                        w = a * Ti
                        out[i, 5] += w * dr
                        out[i, 6] += w * dg
                        out[i, 7] += w * db
                        br = a * cr + (1.0 - a) * br
                        bg = a * cg + (1.0 - a) * bg
                        bb = a * cb + (1.0 - a) * bb
                        gv = gs[k]
                        out[i, 8] += ga * gv
                        gpow = ga * opacs[i] * gv
                        dx = fx - means[i, 0]
                        dy = fy - means[i, 1]
                        out[i, 0] += gpow * (conics[i, 0] * dx + conics[i, 1] * dy)
                        out[i, 1] += gpow * (conics[i, 1] * dx + conics[i, 2] * dy)
                        out[i, 2] += gpow * (-0.5 * dx * dx)
                        out[i, 3] += gpow * (-dx * dy)
                        out[i, 4] += gpow * (-0.5 * dy * dy)
    return buf


# ---------------------------------------------------------------------------
# Python orchestration
# ---------------------------------------------------------------------------


@dataclass
class RenderContext:
    """Everything the backward pass needs from a forward pass."""

    scene: GaussianScene
    cam: Camera
    t: float
    background: np.ndarray
    settings: RasterSettings
    order: np.ndarray
    means: np.ndarray
    conics: np.ndarray
    colors: np.ndarray
    opacs: np.ndarray
    offsets: np.ndarray
    entries: np.ndarray
    tiles_x: int
    caches: tuple | None


def _check_time(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise TimeRangeError(f"render time {t} outside [0, 1]")
    return t


def _prepare(scene: GaussianScene, cam: Camera, t: float, background, settings: RasterSettings):
    background = np.asarray(background, dtype=np.float64).reshape(3)
    tile = int(settings.tile_size)
    tiles_x = (cam.width + tile - 1) // tile
    tiles_y = (cam.height + tile - 1) // tile
    n = len(scene)

    empty = np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    if n == 0:
        offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
        return RenderContext(scene, cam, t, background, settings, np.zeros(0, dtype=np.int64),
                             *empty, offsets, np.zeros(0, dtype=np.int64), tiles_x, None)

    sigma, cov_cache = covariance_batch(scene.log_scale, scene.rot_left, scene.rot_right)
    s_tt = sigma[:, 3, 3]
    if np.any(s_tt < TEMPORAL_VARIANCE_FLOOR):
        raise DegenerateTemporalError("a Gaussian has temporal variance below 1e-12")
    mean3, cov3, weight, cond_cache = condition_batch(sigma, scene.mu, t)
    mean2d, cov2d, depth, proj_cache = project_batch(cam, mean3, cov3, settings.dilation,
                                                     settings.near)
    visible = proj_cache.in_front.copy()
    if settings.temporal_cutoff is not None:
        visible &= np.abs(cond_cache.dt) <= settings.temporal_cutoff * np.sqrt(s_tt)
    if settings.screen_cull:
        visible &= ~splat_outside_image(mean2d, cov2d, cam.width, cam.height)

    color, sh_cache = sh_color_batch(scene.sh_coeffs, mean3 - cam.center)
    alpha = sigmoid(scene.opacity_logit)

    vis_idx = np.flatnonzero(visible)
    order = vis_idx[np.argsort(depth[vis_idx], kind="stable")]

    c2 = cov2d[order]
    det = c2[:, 0, 0] * c2[:, 1, 1] - c2[:, 0, 1] ** 2
    conics = np.ascontiguousarray(np.stack(
        [c2[:, 1, 1] / det, -c2[:, 0, 1] / det, c2[:, 0, 0] / det], axis=1))
    means = np.ascontiguousarray(mean2d[order])
    extents = SIGMA_EXTENT * np.sqrt(np.stack([c2[:, 0, 0], c2[:, 1, 1]], axis=1))
    offsets, entries = _bin_tiles(means, np.ascontiguousarray(extents), cam.width, cam.height,
                                  tile, tiles_x, tiles_y)
    colors = np.ascontiguousarray(color[order])
    opacs = np.ascontiguousarray((alpha * weight)[order])
    caches = (cov_cache, cond_cache, proj_cache, sh_cache, cov2d, weight, alpha)
    return RenderContext(scene, cam, t, background, settings, order, means, conics, colors,
                         opacs, offsets, entries, tiles_x, caches)


def _cutoff(settings: RasterSettings) -> float:
    return -0.5 * SIGMA_EXTENT * SIGMA_EXTENT


def render_with_context(scene, cam: Camera, t: float, background=(1.0, 1.0, 1.0),
                        settings: RasterSettings | None = None):
    """Forward render that also returns the context for :func:`backward_from_context`."""
    settings = settings or RasterSettings()
    scene = GaussianScene.coerce(scene)
    ctx = _prepare(scene, cam, _check_time(t), background, settings)
    image, alpha, n_contrib = _forward_kernel(
        ctx.means, ctx.conics, ctx.colors, ctx.opacs, ctx.offsets, ctx.entries,
        cam.width, cam.height, settings.tile_size, ctx.tiles_x, ctx.background,
        settings.min_transmittance, _cutoff(settings))
    return RenderOutput(image, alpha, n_contrib), ctx


def render(scene, cam: Camera, t: float, background=(1.0, 1.0, 1.0),
           settings: RasterSettings | None = None) -> RenderOutput:
    """Render ``scene`` (a GaussianScene or list of Gaussian4D) at time ``t``."""
    return render_with_context(scene, cam, t, background, settings)[0]


def backward_from_context(ctx: RenderContext, d_image: np.ndarray) -> ParamGradients:
    cam, scene = ctx.cam, ctx.scene
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != (cam.height, cam.width, 3):
        raise InvalidParameterError(
            f"d_image shape {d_image.shape} != {(cam.height, cam.width, 3)}")
    grads = ParamGradients.zeros_like(scene)
    if len(ctx.order) == 0:
        return grads

    buf = _backward_kernel(
        ctx.means, ctx.conics, ctx.colors, ctx.opacs, ctx.offsets, ctx.entries,
        cam.width, cam.height, ctx.settings.tile_size, ctx.tiles_x, ctx.background,
        ctx.settings.min_transmittance, _cutoff(ctx.settings),
        np.ascontiguousarray(d_image), N_PARTITIONS)
    g_sorted = buf.sum(axis=0)

    cov_cache, cond_cache, proj_cache, sh_cache, cov2d, weight, alpha = ctx.caches
    n = len(scene)
    order = ctx.order
    g_mean2d = np.zeros((n, 2))
    g_mean2d[order] = g_sorted[:, 0:2]
    g_color = np.zeros((n, 3))
    g_color[order] = g_sorted[:, 5:8]
    g_opac = np.zeros(n)
    g_opac[order] = g_sorted[:, 8]

    # conic = inverse(cov2d); d cov = -K dK K
    K = np.zeros((n, 2, 2))
    K[order, 0, 0] = ctx.conics[:, 0]
    K[order, 0, 1] = K[order, 1, 0] = ctx.conics[:, 1]
    K[order, 1, 1] = ctx.conics[:, 2]
    g_K = np.zeros((n, 2, 2))
    g_K[order, 0, 0] = g_sorted[:, 2]
    g_K[order, 0, 1] = g_K[order, 1, 0] = 0.5 * g_sorted[:, 3]
    g_K[order, 1, 1] = g_sorted[:, 4]
    g_cov2d = -K @ g_K @ K

    g_mean3, g_cov3 = project_batch_backward(cam, proj_cache, g_mean2d, g_cov2d)
    g_sh, g_dir = sh_color_batch_backward(sh_cache, scene.sh_coeffs, g_color)
    g_mean3 = g_mean3 + g_dir

    g_weight = g_opac * alpha
    g_logit = g_opac * weight * alpha * (1.0 - alpha)

    g_mu, g_sigma = condition_batch_backward(cond_cache, g_mean3, g_cov3, g_weight)
    g_log_scale, g_ql, g_qr = covariance_batch_backward(cov_cache, g_sigma)
    return ParamGradients(g_mu, g_log_scale, g_ql, g_qr, g_logit, g_sh)


def render_backward(scene, cam: Camera, t: float, background, d_image,
                    settings: RasterSettings | None = None) -> ParamGradients:
    """Gradient of ``sum(d_image * render(...).image)`` w.r.t. every parameter."""
    _, ctx = render_with_context(scene, cam, t, background, settings)
    return backward_from_context(ctx, d_image)
