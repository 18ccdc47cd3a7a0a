"""
Image-matrix datasets, orbit camera rigs, synthetic ground-truth scenes and
on-disk formats.

Dataset directory layout::

    manifest.json                     version, M, N, H, W, timestamps, cameras, source
    frames/view_{nn}_time_{mmm}.png   8-bit RGB, read back as linear [0, 1]
    conf/c_rgb.f32, conf/c_ssim.f32   optional float32 confidence, shape (M, N, H, W)
    conf/conf.json                    sidecar describing the confidence arrays

Each camera entry in the manifest holds ``fx, fy, cx, cy`` and a 3x4
``world_to_view`` matrix. Image size comes from the manifest's ``H`` and ``W``.

Scene files are little-endian: a 24-byte header (magic, version, sh degree,
reserved, count as u64) followed by fixed-width float64 records of
4 mean, 4 log-scale, 4 + 4 quaternion, 1 opacity logit and 3 * (L+1)^2 SH.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .confidence import ConfidenceMaps
from .core4d import (
    SH_C0,
    GaussianScene,
    logit,
    quat_conjugate,
    quat_multiply,
    sh_coeff_count,
)
from .errors import (
    ImageCountError,
    InvalidParameterError,
    ManifestError,
    SceneFormatError,
    TimestampOrderError,
)
from .projection import Camera
from .rasterizer import RasterSettings, render

DATASET_VERSION = 1
SCENE_MAGIC = b"S4DG"
SCENE_VERSION = 1
_SCENE_HEADER = struct.Struct("<4sIIIQ")
WHITE = (1.0, 1.0, 1.0)
# temporal scale of a Gaussian that never fades within [0, 1]
STATIC_TEMPORAL_SCALE = 1e4


@dataclass
class ImageMatrix:
    """M timestamps x N views of rendered or imported images.

    ``images`` has shape (M, N, H, W, 3); column 0 is the input-video view.
    """

    images: np.ndarray
    timestamps: np.ndarray
    cameras: list[Camera]
    meta: dict = field(default_factory=lambda: {"source": "imported"})

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.validate()

    def validate(self) -> None:
        if self.images.ndim != 5 or self.images.shape[-1] != 3:
            raise InvalidParameterError("images must have shape (M, N, H, W, 3)")
        m, n, h, w = self.images.shape[:4]
        if m == 0 or n == 0:
            raise InvalidParameterError("image matrix is empty")
        if self.timestamps.shape != (m,):
            raise InvalidParameterError(f"expected {m} timestamps")
        if np.any(np.diff(self.timestamps) <= 0):
            raise TimestampOrderError("timestamps must be strictly increasing")
        if len(self.cameras) != n:
            raise InvalidParameterError(f"expected {n} cameras, got {len(self.cameras)}")
        for cam in self.cameras:
            if (cam.width, cam.height) != (w, h):
                raise InvalidParameterError("camera resolution differs from the images")

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[0], self.images.shape[1]


@dataclass
class OrbitRig:
    n_views: int = 16
    elevation: float = 30.0
    radius: float = 1.5
    fov_y: float = 50.0
    azimuth_offset: float = 0.0


def look_at_camera(eye, target=(0.0, 0.0, 0.0), fov_y: float = 50.0, width: int = 64,
                   height: int = 64, up=(0.0, 0.0, 1.0)) -> Camera:
    """Pinhole camera at ``eye`` whose optical axis passes through ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # looking straight along the up axis
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    focal = 0.5 * height / np.tan(np.radians(fov_y) / 2)
    return Camera(focal, focal, width / 2, height / 2, rotation, -rotation @ eye, width, height)


def build_orbit_rig(cfg: OrbitRig = OrbitRig(), resolution=(64, 64)) -> list[Camera]:
    """Cameras evenly spaced in azimuth at a fixed elevation, all aimed at the origin."""
    if cfg.n_views < 1:
        raise InvalidParameterError("n_views must be at least 1")
    width, height = resolution
    el = np.radians(cfg.elevation)
    cams = []
    for k in range(cfg.n_views):
        az = np.radians(cfg.azimuth_offset + k * 360.0 / cfg.n_views)
        eye = cfg.radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(look_at_camera(eye, fov_y=cfg.fov_y, width=width, height=height))
    return cams


def random_unit_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def uniform_ball(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (radius * rng.uniform(size=n) ** (1.0 / 3.0))[:, None]


def synth_scene(n_gaussians: int, seed: int = 0, motion_amplitude: float = 0.1,
                sh_degree: int = 0) -> GaussianScene:
    """Random ground-truth scene inside the 0.5-radius ball.

    Each Gaussian gets a random 3D orientation followed by a tilt of its
    time axis toward a random spatial direction; the tilt makes the
    conditional mean travel at roughly ``motion_amplitude`` * U(0.5, 1)
    world units per unit time.

    With ``motion_amplitude == 0`` the scene is fully static: the temporal
    scale is set to ``STATIC_TEMPORAL_SCALE`` so nothing fades in or out.
    """
    if n_gaussians < 1:
        raise InvalidParameterError("need at least one Gaussian")
    rng = np.random.default_rng(seed)
    n = n_gaussians
    positions = uniform_ball(rng, n, 0.5)
    mu_t = rng.uniform(0.0, 1.0, n)
    spatial = rng.uniform(0.01, 0.05, (n, 3))
    temporal = rng.uniform(0.2, 0.6, n)
    if motion_amplitude == 0:
        temporal = np.full(n, STATIC_TEMPORAL_SCALE)
    orient = random_unit_quaternions(rng, n)

    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    speed = motion_amplitude * rng.uniform(0.5, 1.0, n)
    half = 0.5 * np.arctan(speed)
    # q = exp(u * theta / 2): with q on both sides this rotates in the (t, u) plane
    tilt = np.concatenate([np.cos(half)[:, None], axis * np.sin(half)[:, None]], axis=1)

    opacity = rng.uniform(0.5, 1.0, n)
    colors = rng.uniform(0.0, 1.0, (n, 3))
    sh = np.zeros((n, sh_coeff_count(sh_degree), 3))
    sh[:, 0] = (colors - 0.5) / SH_C0
    return GaussianScene(
        mu=np.concatenate([positions, mu_t[:, None]], axis=1),
        log_scale=np.log(np.concatenate([spatial, temporal[:, None]], axis=1)),
        rot_left=quat_multiply(tilt, orient),
        rot_right=quat_multiply(quat_conjugate(orient), tilt),
        opacity_logit=np.array([logit(p) for p in opacity]),
        sh_coeffs=sh,
    )


def render_dataset(scene, rig, timestamps, resolution=(64, 64), background=WHITE,
                   settings: RasterSettings | None = None) -> ImageMatrix:
    """Render every (time, view) cell. ``rig`` is an OrbitRig or a camera list."""
    cams = build_orbit_rig(rig, resolution) if isinstance(rig, OrbitRig) else list(rig)
    scene = GaussianScene.coerce(scene)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    h, w = cams[0].height, cams[0].width
    images = np.empty((len(timestamps), len(cams), h, w, 3))
    for i, t in enumerate(timestamps):
        for j, cam in enumerate(cams):
            images[i, j] = render(scene, cam, t, background, settings).image
    return ImageMatrix(np.clip(images, 0.0, 1.0), timestamps, cams, {"source": "synthetic"})


# ---------------------------------------------------------------------------
# Dataset persistence
# ---------------------------------------------------------------------------


def frame_name(view: int, time: int) -> str:
    return f"view_{view:02d}_time_{time:03d}.png"


def camera_to_json(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "world_to_view": cam.world_to_view.tolist()}


def camera_from_json(obj: dict, width: int, height: int) -> Camera:
    e = np.asarray(obj["world_to_view"], dtype=np.float64)
    return Camera(obj["fx"], obj["fy"], obj["cx"], obj["cy"], e[:, :3], e[:, 3], width, height)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_dataset(dataset: ImageMatrix, directory) -> Path:
    root = Path(directory)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    m, n, h, w = dataset.images.shape[:4]
    manifest = {
        "version": DATASET_VERSION,
        "M": m, "N": n, "H": h, "W": w,
        "timestamps": dataset.timestamps.tolist(),
        "cameras": [camera_to_json(c) for c in dataset.cameras],
        "source": dataset.meta.get("source", "imported"),
        "names": dataset.meta.get("names", {}),
    }
    for i in range(m):
        for j in range(n):
            Image.fromarray(to_uint8(dataset.images[i, j])).save(root / "frames" / frame_name(j, i))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def _read_manifest(root: Path) -> dict:
    path = root / "manifest.json"
    if not path.is_file():
        raise ManifestError(f"{path} not found")
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    required = ("version", "M", "N", "H", "W", "timestamps", "cameras")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise ManifestError(f"{path}: missing fields {missing}")
    if manifest["version"] != DATASET_VERSION:
        raise ManifestError(f"{path}: unsupported version {manifest['version']}")
    if len(manifest["timestamps"]) != manifest["M"] or len(manifest["cameras"]) != manifest["N"]:
        raise ManifestError(f"{path}: timestamp/camera counts disagree with M/N")
    return manifest


def load_dataset(directory) -> ImageMatrix:
    root = Path(directory)
    manifest = _read_manifest(root)
    m, n, h, w = (int(manifest[k]) for k in ("M", "N", "H", "W"))
    timestamps = np.asarray(manifest["timestamps"], dtype=np.float64)
    if np.any(np.diff(timestamps) <= 0):
        raise TimestampOrderError(f"{root}: timestamps are not strictly increasing")
    frames = sorted((root / "frames").glob("*.png")) if (root / "frames").is_dir() else []
    if len(frames) != m * n:
        raise ImageCountError(f"{root}: expected {m * n} frames, found {len(frames)}")
    images = np.empty((m, n, h, w, 3))
    for i in range(m):
        for j in range(n):
            path = root / "frames" / frame_name(j, i)
            if not path.is_file():
                raise ImageCountError(f"{path} missing")
            img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
            if img.shape != (h, w, 3):
                raise ManifestError(f"{path}: size {img.shape[:2]} != {(h, w)}")
            images[i, j] = img
    cams = [camera_from_json(c, w, h) for c in manifest["cameras"]]
    meta = {"source": manifest.get("source", "imported"), "names": manifest.get("names", {})}
    return ImageMatrix(images, timestamps, cams, meta)


def save_confidence(maps: ConfidenceMaps, directory) -> None:
    conf = Path(directory) / "conf"
    conf.mkdir(parents=True, exist_ok=True)
    shape = list(np.shape(maps.c_rgb))
    np.asarray(maps.c_rgb, dtype="<f4").tofile(conf / "c_rgb.f32")
    np.asarray(maps.c_ssim, dtype="<f4").tofile(conf / "c_ssim.f32")
    (conf / "conf.json").write_text(json.dumps(
        {"version": 1, "dtype": "<f4", "shape": shape, "files": ["c_rgb.f32", "c_ssim.f32"]}))


def load_confidence(directory) -> ConfidenceMaps | None:
    """Cached confidence maps for a dataset, or ``None`` if absent."""
    conf = Path(directory) / "conf"
    if not (conf / "conf.json").is_file():
        return None
    side = json.loads((conf / "conf.json").read_text())
    shape = tuple(side["shape"])
    arrays = []
    for name in ("c_rgb.f32", "c_ssim.f32"):
        data = np.fromfile(conf / name, dtype="<f4")
        if data.size != int(np.prod(shape)):
            raise ManifestError(f"{conf / name}: size does not match {shape}")
        arrays.append(data.reshape(shape).astype(np.float64))
    return ConfidenceMaps(*arrays)


# ---------------------------------------------------------------------------
# Scene persistence
# ---------------------------------------------------------------------------


def save_scene(scene, path) -> None:
    scene = GaussianScene.coerce(scene)
    n = len(scene)
    records = np.concatenate([
        scene.mu, scene.log_scale, scene.rot_left, scene.rot_right,
        scene.opacity_logit[:, None], scene.sh_coeffs.reshape(n, 3 * sh_coeff_count(scene.sh_degree)),
    ], axis=1)
    header = _SCENE_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, scene.sh_degree, 0, n)
    Path(path).write_bytes(header + records.astype("<f8").tobytes())


def load_scene(path) -> GaussianScene:
    raw = Path(path).read_bytes()
    if len(raw) < _SCENE_HEADER.size:
        raise SceneFormatError(f"{path}: truncated header")
    magic, version, degree, _, n = _SCENE_HEADER.unpack_from(raw)
    if magic != SCENE_MAGIC:
        raise SceneFormatError(f"{path}: bad magic {magic!r}")
    if version != SCENE_VERSION:
        raise SceneFormatError(f"{path}: version {version}, expected {SCENE_VERSION}")
    if degree > 3:
        raise SceneFormatError(f"{path}: SH degree {degree} unsupported")
    k = sh_coeff_count(degree)
    width = 17 + 3 * k
    body = raw[_SCENE_HEADER.size:]
    if len(body) != 8 * width * n:
        raise SceneFormatError(f"{path}: expected {n} records, file is truncated or padded")
    rec = np.frombuffer(body, dtype="<f8").reshape(n, width).astype(np.float64)
    return GaussianScene(rec[:, 0:4], rec[:, 4:8], rec[:, 8:12], rec[:, 12:16], rec[:, 16],
                         rec[:, 17:].reshape(n, k, 3))
