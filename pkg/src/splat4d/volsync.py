"""Time-synchronous smoothing of per-frame feature volumes.

This is the operator a multi-view diffusion sampler would apply to its
spatial feature volumes at every denoising step. The module itself knows
nothing about diffusion: volumes are plain ``(F, V, V, V)`` arrays.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .confidence import interp_midpoint
from .errors import DataError, InvalidParameterError

VOLUME_MAGIC = 0x4C4F5646  # "FVOL" little-endian
VOLUME_VERSION = 1
_HEADER = struct.Struct("<8i")

_SCHEDULE = (
    (13, (1, 1, 1, 1, 1, 2, 14, 2, 1, 1, 1, 1, 1)),
    (7, (1, 1, 1, 6, 1, 1, 1)),
    (5, (1, 1, 6, 1, 1)),
    (3, (1.5, 7, 1.5)),
)


@dataclass
class FeatureVolume:
    data: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise InvalidParameterError("feature volume must be (F, V, V, V)")


@dataclass
class SmoothingWeights:
    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if self.w.size % 2 != 1 or np.any(self.w < 0):
            raise InvalidParameterError("smoothing weights need odd length and no negatives")

    @property
    def half_width(self) -> int:
        return self.w.size // 2

    def normalized(self) -> "SmoothingWeights":
        return SmoothingWeights(self.w / self.w.sum())


def weight_schedule(n_frames: int) -> SmoothingWeights:
    """Normalized smoothing taps for a sequence of ``n_frames`` frames.

    Fewer than three frames get the identity filter.
    """
    if n_frames < 1:
        raise InvalidParameterError("n_frames must be at least 1")
    for lower, taps in _SCHEDULE:
        if n_frames >= lower:
            return SmoothingWeights(taps).normalized()
    return SmoothingWeights([1.0])


def _stack(vols) -> np.ndarray:
    arrays = [v.data if isinstance(v, FeatureVolume) else np.asarray(v, dtype=np.float64)
              for v in vols]
    if not arrays:
        raise InvalidParameterError("no volumes given")
    if any(a.shape != arrays[0].shape for a in arrays):
        raise InvalidParameterError("feature volumes differ in shape")
    return np.stack(arrays)


def smooth_volumes(vols, w: SmoothingWeights) -> list[FeatureVolume]:
    """Replace each volume by the weighted sum of its temporal neighbours.

    Taps that fall off either end of the sequence are dropped and the
    remaining weights renormalized, so every output stays a convex
    combination of inputs.
    """
    data = _stack(vols)
    m = data.shape[0]
    k = w.half_width
    out = []
    for i in range(m):
        lo, hi = max(0, i - k), min(m - 1, i + k)
        taps = w.w[lo - i + k: hi - i + k + 1]
        acc = np.tensordot(taps, data[lo:hi + 1], axes=1) / taps.sum()
        index = vols[i].frame_index if isinstance(vols[i], FeatureVolume) else i
        out.append(FeatureVolume(acc, index))
    return out


def fuse_pair(v1, v2, w: float):
    """Two-frame fusion: each volume keeps ``1 - w`` of itself and takes ``w`` of the other."""
    if not 0.0 <= w <= 0.5:
        raise InvalidParameterError(f"fusion ratio {w} outside [0, 0.5]")
    a, b = _stack([v1, v2])
    i1 = v1.frame_index if isinstance(v1, FeatureVolume) else 0
    i2 = v2.frame_index if isinstance(v2, FeatureVolume) else 1
    return (FeatureVolume((1 - w) * a + w * b, i1),
            FeatureVolume((1 - w) * b + w * a, i2))


def interpolate_column(frames, interp=interp_midpoint) -> list[np.ndarray]:
    """Two recursive midpoint passes: K frames become 4K - 3."""
    frames = list(frames)
    if not frames:
        raise InvalidParameterError("no frames to interpolate")
    for _ in range(2):
        dense = [frames[0]]
        for a, b in zip(frames[:-1], frames[1:]):
            dense += [interp(a, b), b]
        frames = dense
    return frames


def save_volume(vol: FeatureVolume, path) -> None:
    f, v1, v2, v3 = vol.data.shape
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, f, v1, v2, v3, vol.frame_index, 0)
    Path(path).write_bytes(header + vol.data.astype("<f4").tobytes())


def load_volume(path) -> FeatureVolume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated volume header")
    magic, version, f, v1, v2, v3, index, _ = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC or version != VOLUME_VERSION:
        raise DataError(f"{path}: not a version-{VOLUME_VERSION} feature volume")
    count = f * v1 * v2 * v3
    body = raw[_HEADER.size:]
    if len(body) != 4 * count:
        raise DataError(f"{path}: expected {count} floats, found {len(body) // 4}")
    return FeatureVolume(np.frombuffer(body, dtype="<f4").reshape(f, v1, v2, v3), index)
