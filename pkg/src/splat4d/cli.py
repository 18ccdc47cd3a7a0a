"""Command-line entry point: ``splat4d {synth,confidence,train,render,eval}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Each run writes one JSON run manifest next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .confidence import ConfidenceMaps, dataset_confidence, psnr, ssim
from .dataio import (
    ImageMatrix,
    OrbitRig,
    build_orbit_rig,
    load_confidence,
    load_dataset,
    load_scene,
    render_dataset,
    save_confidence,
    save_dataset,
    save_scene,
    synth_scene,
    to_uint8,
)
from .errors import DataError, DegenerateTemporalError, InvalidParameterError, NumericError
from .losses import GUIDANCE_PROVIDERS, LossWeights, get_guidance
from .rasterizer import render, set_threads
from .train import TrainConfig, train, write_history_csv

log = logging.getLogger("splat4d")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SCENE_FILE = "gt_scene.s4dg"
HOLDOUT_DIR = "holdout"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    start_time: float
    end_time: float = 0.0
    outputs: list[str] = field(default_factory=list)
    code_version: str = __version__

    def write(self, path) -> None:
        self.end_time = time.time()
        Path(path).write_text(json.dumps(asdict(self), indent=2, default=str))


def _code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return __version__


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def _time_range(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a..b, got {text!r}") from None
    return a, b


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _timestamps(m: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, m) if m > 1 else np.zeros(1)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> list[str]:
    out = Path(args.out)
    res = args.res
    scene = synth_scene(args.gaussians, args.seed, args.motion, args.sh_degree)
    rig = OrbitRig(n_views=args.views, elevation=args.elevation, radius=args.radius,
                   fov_y=args.fov)
    ts = _timestamps(args.times)
    save_dataset(render_dataset(scene, rig, ts, res), out)
    save_scene(scene, out / SCENE_FILE)
    outputs = [str(out / "manifest.json"), str(out / SCENE_FILE)]
    if args.holdout_azimuth:
        cams = []
        for az in args.holdout_azimuth:
            cams += build_orbit_rig(
                OrbitRig(1, args.elevation, args.radius, args.fov, az), res)
        save_dataset(render_dataset(scene, cams, ts, res), out / HOLDOUT_DIR)
        outputs.append(str(out / HOLDOUT_DIR / "manifest.json"))
    print(f"wrote {args.times} x {args.views} images at {res[0]}x{res[1]} to {out}")
    return outputs


def _column_means(maps: ConfidenceMaps) -> list[tuple[int, float, float]]:
    rgb = np.asarray(maps.c_rgb)
    st = np.asarray(maps.c_ssim)
    return [(j, float(rgb[:, j].mean()), float(st[:, j].mean())) for j in range(rgb.shape[1])]


def compute_confidence(data: ImageMatrix, column: int | None = None,
                       existing: ConfidenceMaps | None = None) -> ConfidenceMaps:
    m, n, h, w = data.images.shape[:4]
    if m < 3:
        log.warning("only %d timestamps: confidence maps default to ones", m)
    if column is None:
        return dataset_confidence(data.images)
    if not 0 <= column < n:
        raise InvalidParameterError(f"column {column} outside [0, {n})")
    maps = existing if existing is not None else ConfidenceMaps.ones((m, n, h, w))
    part = dataset_confidence(data.images, columns=[column])
    c_rgb, c_ssim = np.array(maps.c_rgb), np.array(maps.c_ssim)
    c_rgb[:, column], c_ssim[:, column] = part.c_rgb[:, column], part.c_ssim[:, column]
    return ConfidenceMaps(c_rgb, c_ssim)


def cmd_confidence(args) -> list[str]:
    data = load_dataset(args.data)
    existing = load_confidence(args.data) if args.column is not None else None
    maps = compute_confidence(data, args.column, existing)
    save_confidence(maps, args.data)
    columns = range(data.shape[1]) if args.column is None else [args.column]
    means = _column_means(maps)
    print("column  mean_c_rgb  mean_c_ssim")
    for j in columns:
        print(f"{j:6d}  {means[j][1]:10.6f}  {means[j][2]:11.6f}")
    conf = Path(args.data) / "conf"
    return [str(conf / "c_rgb.f32"), str(conf / "c_ssim.f32")]


def cmd_train(args) -> list[str]:
    data = load_dataset(args.data)
    if args.no_confidence:
        maps = None
    else:
        maps = load_confidence(args.data)
        if maps is None:
            print("no cached confidence maps; computing them now", file=sys.stderr)
            maps = compute_confidence(data)
            try:
                save_confidence(maps, args.data)
            except OSError as exc:
                log.warning("could not cache confidence maps: %s", exc)
    cfg = TrainConfig(iterations=args.iters, init_count=args.init, seed=args.seed,
                      sh_degree=args.sh_degree, learning_rates=dict(args.learning_rates or {}))
    weights = LossWeights(args.lrgb, args.lssim, args.lsds)
    result = train(data, maps, cfg, weights, get_guidance(args.guidance))
    scene_path = Path(args.out)
    scene_path.parent.mkdir(parents=True, exist_ok=True)
    save_scene(result.scene, scene_path)
    csv_path = scene_path.with_suffix(".loss.csv")
    write_history_csv(csv_path, result.history)
    for note in result.diagnostics:
        print(f"diagnostic: {note}", file=sys.stderr)
    final = result.history[-1][1] if result.history else float("nan")
    print(f"trained {len(result.scene)} Gaussians, final loss {final:.4f}")
    return [str(scene_path), str(csv_path)]


def trajectory(kind: str, frames: int, time_range, res, azimuth=0.0, elevation=30.0,
               radius=1.5, fov=50.0):
    """Cameras and timestamps for ``frames`` renders along an orbit or a fixed view."""
    if frames < 1:
        raise InvalidParameterError("frames must be at least 1")
    a, b = time_range
    times = np.linspace(a, b, frames) if frames > 1 else np.array([a])
    if kind == "orbit":
        azimuths = azimuth + np.arange(frames) * 360.0 / frames
    else:
        azimuths = np.full(frames, azimuth)
    cams = [build_orbit_rig(OrbitRig(1, elevation, radius, fov, az), res)[0] for az in azimuths]
    return cams, times


def cmd_render(args) -> list[str]:
    scene = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cams, times = trajectory(args.traj, args.frames, args.time_range, args.res, args.azimuth,
                             args.elevation, args.radius, args.fov)
    outputs, elapsed = [], 0.0
    for k, (cam, t) in enumerate(zip(cams, times)):
        start = time.perf_counter()
        img = render(scene, cam, float(t)).image
        elapsed += time.perf_counter() - start
        path = out / f"frame_{k:04d}.png"
        Image.fromarray(to_uint8(img)).save(path)
        outputs.append(str(path))
    print(f"rendered {len(cams)} frames, mean {1000.0 * elapsed / len(cams):.2f} ms/frame")
    return outputs


EVAL_FIELDS = ("view", "psnr", "ssim")


def evaluate(scene, data: ImageMatrix, views=None) -> list[tuple]:
    """Per-view mean PSNR/SSIM over all timestamps, then an ``all`` row."""
    n = data.shape[1]
    views = list(range(n)) if not views else list(views)
    for j in views:
        if not 0 <= j < n:
            raise InvalidParameterError(f"view {j} outside [0, {n})")
    rows, all_p, all_s = [], [], []
    for j in views:
        ps, ss = [], []
        for i, t in enumerate(data.timestamps):
            img = np.clip(render(scene, data.cameras[j], float(t)).image, 0.0, 1.0)
            ps.append(psnr(img, data.images[i, j]))
            ss.append(ssim(img, data.images[i, j]))
        rows.append((j, float(np.mean(ps)), float(np.mean(ss))))
        all_p += ps
        all_s += ss
    rows.append(("all", float(np.mean(all_p)), float(np.mean(all_s))))
    return rows


def cmd_eval(args) -> list[str]:
    scene = load_scene(args.scene)
    data = load_dataset(args.data)
    rows = evaluate(scene, data, args.holdout_views)
    print(f"{'view':>6}  {'psnr':>8}  {'ssim':>7}")
    for view, p, s in rows:
        print(f"{view!s:>6}  {p:8.3f}  {s:7.4f}")
    csv_path = Path(args.csv) if args.csv else Path(args.scene).with_suffix(".eval.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_FIELDS)
        writer.writerows((v, repr(p), repr(s)) for v, p, s in rows)
    return [str(csv_path)]


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys override flag defaults")
    common.add_argument("--threads", type=int, default=None,
                        help="worker thread cap (1 = single-threaded)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="splat4d", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    p.add_argument("--gaussians", type=int, default=200)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--times", type=int, default=5)
    p.add_argument("--res", type=_resolution, default=(64, 64), metavar="WxH")
    p.add_argument("--motion", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sh-degree", type=int, default=0)
    p.add_argument("--elevation", type=float, default=30.0)
    p.add_argument("--radius", type=float, default=1.5)
    p.add_argument("--fov", type=float, default=50.0)
    p.add_argument("--holdout-azimuth", type=float, action="append", default=[],
                   help="also render a held-out view at this azimuth (degrees); repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth, manifest_name="run_synth.json")

    p = sub.add_parser("confidence", parents=[common], help="precompute confidence maps")
    p.add_argument("--data", required=True)
    p.add_argument("--column", type=int, default=None)
    p.set_defaults(func=cmd_confidence, manifest_name="conf/run_confidence.json")

    p = sub.add_parser("train", parents=[common], help="fit a scene to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output scene file")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--init", type=int, default=2000)
    p.add_argument("--lrgb", type=float, default=8000.0)
    p.add_argument("--lssim", type=float, default=2000.0)
    p.add_argument("--lsds", type=float, default=0.0)
    p.add_argument("--guidance", choices=sorted(GUIDANCE_PROVIDERS), default="null")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sh-degree", type=int, default=2)
    p.add_argument("--no-confidence", action="store_true",
                   help="train with confidence maps forced to one")
    p.set_defaults(func=cmd_train, manifest_name=None, learning_rates=None)

    p = sub.add_parser("render", parents=[common], help="render a trajectory to PNGs")
    p.add_argument("--scene", required=True)
    p.add_argument("--traj", choices=("orbit", "fixed"), default="orbit")
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--time-range", type=_time_range, default=(0.0, 1.0), metavar="a..b")
    p.add_argument("--res", type=_resolution, default=(64, 64), metavar="WxH")
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=30.0)
    p.add_argument("--radius", type=float, default=1.5)
    p.add_argument("--fov", type=float, default=50.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render, manifest_name="run_render.json")

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of a scene on a dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--holdout-views", type=_int_list, default=None, metavar="LIST",
                   help="comma-separated view indices (default: all)")
    p.add_argument("--csv", default=None, help="CSV output path")
    p.set_defaults(func=cmd_eval, manifest_name=None)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise UsageError("config must be a JSON object")
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparser = sub.choices[args.command]
    known = {a.dest for a in subparser._actions} | {"learning_rates"}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    # config values become defaults, so explicit flags still win
    subparser.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
    args = parser.parse_args(argv)
    for key in ("res", "time_range"):
        if isinstance(getattr(args, key, None), list):
            setattr(args, key, tuple(getattr(args, key)))
    return args


def _manifest_path(args) -> Path:
    if args.command == "train":
        return Path(args.out).with_suffix(".run.json")
    if args.command == "eval":
        return Path(args.csv or Path(args.scene).with_suffix(".eval.csv")).with_suffix(".run.json")
    root = Path(args.data if args.command == "confidence" else args.out)
    return root / args.manifest_name


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"splat4d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        set_threads(args.threads)

    snapshot = {k: v for k, v in vars(args).items() if k not in ("func", "manifest_name")}
    manifest = RunManifest(args.command, snapshot, getattr(args, "seed", None), time.time(),
                           code_version=_code_version())
    try:
        with np.errstate(over="ignore", under="ignore"):
            manifest.outputs = args.func(args)
        manifest.write(_manifest_path(args))
    except (NumericError, DegenerateTemporalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"splat4d: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidParameterError as exc:
        print(f"splat4d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"splat4d: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
