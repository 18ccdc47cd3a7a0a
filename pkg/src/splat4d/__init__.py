"""Dynamic 4D Gaussian splatting on the CPU."""
import warnings

# numba probes for TBB on import and falls back to OpenMP; the notice is noise
warnings.filterwarnings("ignore", message=".*TBB threading layer.*")

from .confidence import ConfidenceMaps, dataset_confidence, psnr, ssim, ssim_map  # noqa: E402
from .core4d import (  # noqa: E402
    Conditional3D,
    Covariance4,
    Gaussian4D,
    GaussianScene,
    build_covariance,
    build_rotation,
    condition_on_time,
    eval_density,
    eval_sh_color,
)
from .dataio import (  # noqa: E402
    ImageMatrix,
    OrbitRig,
    build_orbit_rig,
    load_dataset,
    load_scene,
    render_dataset,
    save_dataset,
    save_scene,
    synth_scene,
)
from .errors import DataError, InvalidParameterError, NumericError  # noqa: E402
from .losses import LossWeights, loss_img_conf  # noqa: E402
from .projection import Camera  # noqa: E402
from .rasterizer import RasterSettings, render, render_backward  # noqa: E402
from .train import TrainConfig, train  # noqa: E402
from .volsync import fuse_pair, interpolate_column, smooth_volumes, weight_schedule  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Camera", "Conditional3D", "ConfidenceMaps", "Covariance4", "DataError", "Gaussian4D",
    "GaussianScene", "ImageMatrix", "InvalidParameterError", "LossWeights", "NumericError",
    "OrbitRig", "RasterSettings", "TrainConfig", "build_covariance", "build_orbit_rig",
    "build_rotation", "condition_on_time", "dataset_confidence", "eval_density",
    "eval_sh_color", "fuse_pair", "interpolate_column", "load_dataset", "load_scene",
    "loss_img_conf", "psnr", "render", "render_backward", "render_dataset", "save_dataset",
    "save_scene", "smooth_volumes", "ssim", "ssim_map", "synth_scene", "train",
    "weight_schedule",
]
