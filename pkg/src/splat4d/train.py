"""Adam, scene initialization, pruning and the reconstruction loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .confidence import ConfidenceMaps
from .core4d import GaussianScene, logit, sh_coeff_count, sigmoid
from .dataio import WHITE, ImageMatrix, uniform_ball
from .errors import InvalidParameterError, NumericError
from .losses import GuidanceProvider, LossWeights, NullGuidance, apply_guidance, loss_img_conf
from .rasterizer import RasterSettings, backward_from_context, render_with_context

log = logging.getLogger(__name__)

DEFAULT_LEARNING_RATES = {
    "mu": 1.6e-3,
    "log_scale": 5e-3,
    "rot_left": 1e-3,
    "rot_right": 1e-3,
    "opacity_logit": 5e-2,
    "sh_coeffs": 2.5e-3,
}
QUATERNION_GROUPS = ("rot_left", "rot_right")


@dataclass
class TrainConfig:
    iterations: int = 500
    batch_size: int = 1
    init_count: int = 2000
    init_radius: float = 0.5
    learning_rates: dict = field(default_factory=lambda: dict(DEFAULT_LEARNING_RATES))
    prune_opacity_threshold: float = 0.005
    prune_interval: int = 100
    densify: bool = False
    sh_degree: int = 2
    seed: int = 0
    background: tuple = WHITE

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidParameterError("iterations must be nonnegative")
        if self.init_count <= 0 or self.init_radius <= 0:
            raise InvalidParameterError("init_count and init_radius must be positive")
        if self.batch_size != 1:
            raise InvalidParameterError("only batch_size 1 is supported")
        self.learning_rates = {**DEFAULT_LEARNING_RATES, **self.learning_rates}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)

    def select(self, mask) -> None:
        """Drop optimizer moments for pruned Gaussians."""
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k][mask]


def adam_step(params: dict, grads: dict, state: AdamState, lrs: dict,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              normalize=QUATERNION_GROUPS) -> list[str]:
    """One bias-corrected Adam update, in place on ``params``.

    Groups with a non-finite gradient are left untouched and reported in
    the returned list (and in ``state.diagnostics``). Quaternion groups are
    renormalized after the update.
    """
    skipped = []
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            skipped.append(name)
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.steps[name] = 0
        state.steps[name] += 1
        k = state.steps[name]
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**k)
        v_hat = v / (1 - beta2**k)
        p -= lrs.get(name, 0.0) * m_hat / (np.sqrt(v_hat) + eps)
        if name in normalize:
            p /= np.linalg.norm(p, axis=-1, keepdims=True)
    if skipped:
        state.diagnostics.append(f"non-finite gradient in {', '.join(skipped)}")
        log.warning("skipped Adam update for %s (non-finite gradient)", skipped)
    return skipped


# ---------------------------------------------------------------------------
# Scene initialization and pruning
# ---------------------------------------------------------------------------


def init_scene(cfg: TrainConfig) -> GaussianScene:
    """Random Gaussians in the init ball with identity rotations and gray color."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.init_count
    positions = uniform_ball(rng, n, cfg.init_radius)
    mu_t = rng.uniform(0.0, 1.0, n)
    spatial = cfg.init_radius * n ** (-1.0 / 3.0)
    log_scale = np.tile(np.log([spatial, spatial, spatial, 0.5]), (n, 1))
    identity = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianScene(
        mu=np.concatenate([positions, mu_t[:, None]], axis=1),
        log_scale=log_scale,
        rot_left=identity,
        rot_right=identity.copy(),
        opacity_logit=np.full(n, logit(0.1)),
        sh_coeffs=np.zeros((n, sh_coeff_count(cfg.sh_degree), 3)),
    )


def prune(scene: GaussianScene, threshold: float):
    """Drop Gaussians whose opacity is below ``threshold``; returns (scene, keep mask)."""
    if not 0.0 <= threshold < 1.0:
        raise InvalidParameterError("prune threshold must lie in [0, 1)")
    keep = sigmoid(scene.opacity_logit) >= threshold
    return scene.select(keep), keep


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

HISTORY_FIELDS = ("iteration", "total", "rgb_term", "ssim_term", "guidance_norm")


@dataclass
class TrainResult:
    scene: GaussianScene
    history: list[tuple]
    diagnostics: list[str]


def train(
    dataset: ImageMatrix,
    maps: ConfidenceMaps | None,
    cfg: TrainConfig,
    weights: LossWeights,
    provider: GuidanceProvider | None = None,
    init: GaussianScene | None = None,
    densify: Callable | None = None,
    settings: RasterSettings | None = None,
) -> TrainResult:
    """Fit a scene to ``dataset`` one randomly drawn image per iteration.

    ``maps`` holds (M, N, H, W) confidence arrays; ``None`` means all ones.
    ``init`` overrides :func:`init_scene`. Guidance for a (time, view) cell is
    conditioned on view 0 at the same time.
    """
    m, n = dataset.shape
    h, w = dataset.images.shape[2:4]
    if maps is None:
        maps = ConfidenceMaps.ones((m, n, h, w))
    if np.shape(maps.c_rgb) != (m, n, h, w):
        raise InvalidParameterError("confidence maps are not aligned with the dataset")
    if cfg.densify and densify is None:
        raise InvalidParameterError("densify is enabled but no densification strategy was given")
    provider = provider or NullGuidance()

    rng = np.random.default_rng(cfg.seed)
    scene = init.copy() if init is not None else init_scene(cfg)
    state = AdamState()
    history = []
    for it in range(cfg.iterations):
        i, j = int(rng.integers(m)), int(rng.integers(n))
        out, ctx = render_with_context(scene, dataset.cameras[j], dataset.timestamps[i],
                                       cfg.background, settings)
        loss = loss_img_conf(out.image, dataset.images[i, j], maps[i, j], weights)
        d_image = loss.grad
        guidance_norm = 0.0
        if weights.lambda_sds > 0:
            g_guid = apply_guidance(provider, out.image, dataset.images[i, 0], weights.lambda_sds)
            guidance_norm = float(np.linalg.norm(g_guid))
            d_image = d_image + g_guid
        grads = backward_from_context(ctx, d_image)
        adam_step(scene.params(), grads.as_dict(), state, cfg.learning_rates)
        history.append((it, loss.total, loss.rgb_term, loss.ssim_term, guidance_norm))

        if cfg.prune_interval and (it + 1) % cfg.prune_interval == 0:
            if cfg.densify:
                scene, state = densify(scene, state)
            scene, keep = prune(scene, cfg.prune_opacity_threshold)
            state.select(keep)
            if len(scene) == 0:
                raise NumericError(f"every Gaussian was pruned at iteration {it + 1}")
    return TrainResult(scene, history, state.diagnostics)


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_FIELDS)
        for row in history:
            writer.writerow([row[0], *(repr(float(x)) for x in row[1:])])
