"""Confidence-weighted image loss and the image-space guidance seam."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .confidence import ConfidenceMaps, SSIMTerms
from .errors import InvalidParameterError


@dataclass
class LossWeights:
    lambda_rgb_base: float = 8000.0
    lambda_ssim_base: float = 2000.0
    lambda_sds: float = 1.0

    def __post_init__(self):
        if min(self.lambda_rgb_base, self.lambda_ssim_base, self.lambda_sds) < 0:
            raise InvalidParameterError("loss weights must be nonnegative")


@dataclass
class ImageLoss:
    total: float
    rgb_term: float
    ssim_term: float
    grad: np.ndarray


def loss_img_conf(render: np.ndarray, target: np.ndarray, maps: ConfidenceMaps,
                  weights: LossWeights) -> ImageLoss:
    """Confidence-weighted L1 + SSIM loss and its gradient w.r.t. ``render``.

    ``rgb_term`` and ``ssim_term`` are reported already multiplied by their
    base weights, so ``total == rgb_term + ssim_term``.
    """
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render.shape != target.shape:
        raise InvalidParameterError(f"shape mismatch {render.shape} vs {target.shape}")
    h, w, c = render.shape
    c_rgb = np.asarray(maps.c_rgb, dtype=np.float64)
    c_ssim = np.asarray(maps.c_ssim, dtype=np.float64)
    if c_rgb.shape != (h, w) or c_ssim.shape != (h, w):
        raise InvalidParameterError("confidence maps do not match the image size")
    count = h * w * c

    diff = render - target
    rgb = weights.lambda_rgb_base * float(np.sum(c_rgb[..., None] * np.abs(diff))) / count
    g_rgb = (weights.lambda_rgb_base / count) * c_rgb[..., None] * np.sign(diff)

    terms = SSIMTerms(render, target, truncate=True)
    ssim_term = weights.lambda_ssim_base * float(np.mean(c_ssim * (1.0 - terms.S.mean(axis=-1))))
    g_S = np.broadcast_to((-weights.lambda_ssim_base / count) * c_ssim[..., None], terms.S.shape)
    g_ssim = terms.grad_x(g_S)
    return ImageLoss(rgb + ssim_term, rgb, ssim_term, g_rgb + g_ssim)


class GuidanceProvider(Protocol):
    """Image-space guidance (the seam where a score-distillation model plugs in).

    ``__call__`` returns a per-pixel gradient shaped like ``render`` and a
    scalar weight that multiplies it.
    """

    name: str
    requires_condition: bool

    def __call__(self, render: np.ndarray, condition: np.ndarray | None): ...


class NullGuidance:
    name = "null"
    requires_condition = False

    def __call__(self, render, condition=None):
        return np.zeros_like(render), 1.0


class DebugPullGuidance:
    """Gradient of 0.5 * ||render - condition||^2; for wiring tests only."""

    name = "debug"
    requires_condition = True

    def __call__(self, render, condition=None):
        return np.asarray(render, dtype=np.float64) - condition, 1.0


GUIDANCE_PROVIDERS = {"null": NullGuidance, "debug": DebugPullGuidance}


def get_guidance(name: str) -> GuidanceProvider:
    try:
        return GUIDANCE_PROVIDERS[name]()
    except KeyError:
        raise InvalidParameterError(f"unknown guidance provider {name!r}") from None


def apply_guidance(provider: GuidanceProvider, render: np.ndarray, condition=None,
                   lambda_sds: float = 1.0) -> np.ndarray:
    if provider.requires_condition and condition is None:
        raise InvalidParameterError(f"guidance {provider.name!r} needs a condition image")
    grad, weight = provider(render, condition)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(render):
        raise InvalidParameterError("guidance gradient shape differs from the render")
    return (lambda_sds * weight) * grad
