"""Temporal self-consistency confidence maps, SSIM and PSNR.

A frame is trusted where it agrees with interpolations of its temporal
neighbours. The interpolator is injectable; the default is a plain
midpoint blend.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidParameterError

SSIM_RADIUS = 5
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0

Interpolator = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class ConfidenceMaps:
    """Per-pixel loss weights; arrays may carry leading (M, N) axes."""

    c_rgb: np.ndarray
    c_ssim: np.ndarray

    @classmethod
    def ones(cls, shape) -> "ConfidenceMaps":
        return cls(np.ones(shape), np.ones(shape))

    def __getitem__(self, idx) -> "ConfidenceMaps":
        return ConfidenceMaps(self.c_rgb[idx], self.c_ssim[idx])


def interp_midpoint(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    return 0.5 * (a + b)


@lru_cache(maxsize=32)
def _filter_matrix(n: int, radius: int) -> np.ndarray:
    """Gaussian blur along one axis as an (n, n) matrix, symmetric padding."""
    taps = np.arange(-radius, radius + 1)
    w = np.exp(-0.5 * (taps / SSIM_SIGMA) ** 2)
    w /= w.sum()
    A = np.zeros((n, n))
    for i in range(n):
        for k, wk in zip(taps, w):
            j = i + k
            # half-sample symmetric reflection: -1 -> 0, n -> n - 1
            while j < 0 or j >= n:
                j = -j - 1 if j < 0 else 2 * n - j - 1
            A[i, j] += wk
    A.setflags(write=False)
    return A


def _radius_for(n: int, truncate: bool) -> int:
    if n >= 2 * SSIM_RADIUS + 1:
        return SSIM_RADIUS
    if not truncate:
        raise InvalidParameterError(
            f"image side {n} is smaller than the {2 * SSIM_RADIUS + 1}-pixel SSIM window")
    return (n - 1) // 2


def _as_hwc(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 2 else x


class SSIMTerms:
    """Windowed SSIM statistics for one image pair, kept for the gradient."""

    def __init__(self, x, y, truncate: bool):
        x, y = _as_hwc(x), _as_hwc(y)
        if x.shape != y.shape:
            raise InvalidParameterError(f"shape mismatch {x.shape} vs {y.shape}")
        h, w = x.shape[:2]
        self.Ah = _filter_matrix(h, _radius_for(h, truncate))
        self.Aw = _filter_matrix(w, _radius_for(w, truncate))
        self.x, self.y = x, y
        c1, c2 = SSIM_K1**2, SSIM_K2**2
        mx, my = self.blur(x), self.blur(y)
        sxx = self.blur(x * x) - mx * mx
        syy = self.blur(y * y) - my * my
        sxy = self.blur(x * y) - mx * my
        self.l1 = 2 * mx * my + c1
        self.l2 = mx * mx + my * my + c1
        self.s1 = 2 * sxy + c2
        self.s2 = sxx + syy + c2
        self.mx, self.my = mx, my
        self.den = self.l2 * self.s2
        self.S = self.l1 * self.s1 / self.den

    def blur(self, img):
        return np.einsum("ij,jkc,lk->ilc", self.Ah, img, self.Aw, optimize=True)

    def blur_adjoint(self, img):
        return np.einsum("ji,jkc,kl->ilc", self.Ah, img, self.Aw, optimize=True)

    def grad_x(self, g_S):
        """Gradient w.r.t. ``x`` given d/dS per pixel and channel."""
        S, my = self.S, self.my
        # S = l1 s1 / (l2 s2) written in blurred moments of x
        d_m1 = (2 * my * (self.s1 - self.l1) - S * 2 * self.mx * (self.s2 - self.l2)) / self.den
        d_m2 = -S / self.s2
        d_m12 = 2 * self.l1 / self.den
        return (self.blur_adjoint(g_S * d_m1)
                + 2 * self.x * self.blur_adjoint(g_S * d_m2)
                + self.y * self.blur_adjoint(g_S * d_m12))


def ssim_map(a: np.ndarray, b: np.ndarray, truncate_window: bool = False) -> np.ndarray:
    """Per-pixel SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.

    Images smaller than the window raise unless ``truncate_window`` is set,
    in which case the window shrinks to fit.
    """
    return SSIMTerms(a, b, truncate_window).S.mean(axis=-1)


def ssim(a, b, truncate_window: bool = False) -> float:
    return float(ssim_map(a, b, truncate_window).mean())


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def confidence_for_frame(
    column: Sequence[np.ndarray],
    index: int,
    interp: Interpolator = interp_midpoint,
) -> ConfidenceMaps:
    """Confidence of frame ``index`` (0-based) of a single-view column.

    The frame is compared against interpolations from its +-1 and +-2
    neighbours. Estimates whose neighbours fall outside the column are
    skipped; with none available the maps are all ones.
    """
    if len(column) == 0:
        raise InvalidParameterError("empty column")
    m = len(column)
    if not 0 <= index < m:
        raise InvalidParameterError(f"frame index {index} outside column of {m}")
    frames = [np.clip(np.asarray(f, dtype=np.float64), 0.0, 1.0) for f in column]
    frame = frames[index]
    hw = frame.shape[:2]
    estimates = [interp(frames[index - d], frames[index + d])
                 for d in (1, 2) if index - d >= 0 and index + d < m]
    if not estimates:
        return ConfidenceMaps.ones(hw)
    diffs = [np.abs(frame - est).reshape(*hw, -1).mean(axis=-1) for est in estimates]
    c_rgb = 1.0 - np.mean(diffs, axis=0)
    c_ssim = np.mean([ssim_map(frame, est, truncate_window=True) for est in estimates], axis=0)
    return ConfidenceMaps(c_rgb, c_ssim)


def confidence_for_column(column, interp: Interpolator = interp_midpoint) -> list[ConfidenceMaps]:
    return [confidence_for_frame(column, m, interp) for m in range(len(column))]


def dataset_confidence(images: np.ndarray, interp: Interpolator = interp_midpoint,
                       columns=None) -> ConfidenceMaps:
    """Confidence for an (M, N, H, W, 3) image matrix, stacked as (M, N, H, W).

    ``columns`` restricts the computation to some views; the others stay 1.
    """
    images = np.asarray(images)
    m, n, h, w = images.shape[:4]
    maps = ConfidenceMaps.ones((m, n, h, w))
    for j in range(n) if columns is None else columns:
        for i, cm in enumerate(confidence_for_column(list(images[:, j]), interp)):
            maps.c_rgb[i, j] = cm.c_rgb
            maps.c_ssim[i, j] = cm.c_ssim
    return maps
