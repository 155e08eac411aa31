"""Command-line interface: scene generation, label rasterization, training,
evaluation, ablation sweeps and plotting."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as mx
from . import synthetic as syn
from . import training
from .config import apply_overrides, load_config, resolve, write_resolved
from .elevation import (ElevationMap, generate_gt, load_elevation_map,
                        load_point_cloud_text, save_elevation_map, save_point_cloud_text)
from .errors import RoadBevError
from .geometry import inverse
from .seeding import rng_for

logger = logging.getLogger("roadbev")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("ROADBEV_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise SystemExit(f"ROADBEV_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level],
                        format="%(asctime)s %(name)s %(levelname)s: %(message)s")


def _save_png(path: Path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(image * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--toy", action="store_true", help="apply the small CI-scale profile")
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker cap (execution is sequential and deterministic)")
    parser.add_argument("--loss-reduction", choices=["sum", "mean"], default=None)
    parser.add_argument("--volume", choices=["multiply", "subtract"], default=None)
    parser.add_argument("--mode", choices=["nearest", "bilinear"], default=None,
                        help="feature sampling mode")


def _config_from_args(args) -> "training.RunConfig":
    extra = {}
    if getattr(args, "loss_reduction", None):
        extra["model.loss_reduction"] = args.loss_reduction
    if getattr(args, "volume", None):
        extra["model.volume_mode"] = args.volume
    if getattr(args, "mode", None):
        extra["model.sampling_mode"] = args.mode
    if getattr(args, "jobs", 1) < 1:
        raise SystemExit("--jobs must be >= 1")
    return load_config(args.config, toy=args.toy, seed=args.seed, extra=extra)


def cmd_gen_scene(args) -> int:
    config = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.seed
    hf, tex = syn.make_scene(args.kind, seed, grid=config.grid,
                             texture_octaves=config.texture_octaves,
                             texture_base_cell=config.texture_base_cell)
    cam_to_road = config.cam_to_road()
    right_c2r = inverse(config.road_to_right_cam()) if config.camera.baseline > 0 else None
    sample = syn.render_sample(hf, tex, config.grid, config.camera, cam_to_road,
                               right_c2r, descriptor={"kind": args.kind, "seed": seed},
                               n_iters=config.n_march_iters)
    _save_png(out / "left.png", sample.left)
    if sample.right is not None:
        _save_png(out / "right.png", sample.right)
    save_elevation_map(out / "gt.rbev", sample.gt, config.grid)
    cloud = syn.sample_point_cloud(hf, config.grid, density=args.density, seed=seed)
    save_point_cloud_text(out / "cloud.txt", cloud)
    (out / "pose.json").write_text(json.dumps(
        {"roll": config.roll, "pitch": config.pitch,
         "camera_height": config.camera_height}, indent=2) + "\n")
    descriptor = {
        "kind": args.kind, "seed": seed, "flagged_rays": sample.descriptor["flagged_rays"],
        "primitives": [repr(p) for p in hf.primitives],
        "camera": config.raw["camera"], "pose": config.raw["pose"],
        "code_version": __version__,
    }
    (out / "scene.json").write_text(json.dumps(descriptor, indent=2, sort_keys=True) + "\n")
    logger.info("scene written to %s", out)
    return 0


def cmd_gen_labels(args) -> int:
    config = _config_from_args(args)
    points = load_point_cloud_text(args.cloud)
    emap = generate_gt(points, config.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_elevation_map(out / "labels.rbev", emap, config.grid)
    logger.info("labels written to %s (%d valid cells)", out / "labels.rbev",
                int(emap.mask.sum()))
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    result = training.train(config, out_dir=args.out)
    logger.info("final train abs_err %.4f cm%s", result.train_metrics.abs_err,
                f", eval abs_err {result.eval_metrics.abs_err:.4f} cm"
                if result.eval_metrics else "")
    return 0


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    model, tables, _meta = training.restore_model(config, args.checkpoint)
    _train_samples, eval_samples = training.build_datasets(config)
    samples = eval_samples or _train_samples
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(config, out)
    acc = mx.MetricAccumulator()
    profile_acc = None
    for sample in samples:
        t0 = time.perf_counter()
        pred = training.predict_sample(model, sample, tables)
        acc.add(pred, sample.gt, wall_time=time.perf_counter() - t0)
        prof = mx.distance_profile(pred, sample.gt)
        if profile_acc is None:
            profile_acc = prof
        else:
            merged_err = []
            merged_n = []
            for (e1, n1), (e2, n2) in zip(zip(profile_acc.abs_err, profile_acc.n_valid),
                                          zip(prof.abs_err, prof.n_valid)):
                n = n1 + n2
                if n == 0:
                    merged_err.append(None)
                else:
                    merged_err.append(((e1 or 0.0) * n1 + (e2 or 0.0) * n2) / n)
                merged_n.append(n)
            profile_acc = mx.DistanceProfile(abs_err=merged_err, n_valid=merged_n,
                                             row_ranges=prof.row_ranges)
    report = acc.report()
    (out / "metrics.json").write_text(json.dumps(report.as_dict(), indent=2,
                                                 sort_keys=True) + "\n")
    mx.profile_to_csv(profile_acc, out / "distance_profile.csv")
    logger.info("eval: abs_err %.4f cm over %d cells", report.abs_err, report.n_valid)
    return 0


def cmd_ablate(args) -> int:
    config_doc = {}
    if args.config:
        config_doc = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        config_doc["seed"] = args.seed
    if args.sweep == "class-interval":
        overrides = mx.class_interval_sweep()
    elif args.sweep == "stereo-volume":
        overrides = mx.stereo_volume_sweep()
    elif args.sweep == "voxel-res":
        overrides = mx.voxel_resolution_sweep()
    else:
        overrides = [dict(o) for o in json.loads(Path(args.sweep).read_text())]

    variants = []
    for k, override in enumerate(overrides):
        doc = apply_overrides(config_doc, override)
        variants.append((f"v{k:02d}", resolve(doc, toy=args.toy)))

    def run_variant(cfg):
        result = training.train(cfg, out_dir=None)
        report = result.eval_metrics or result.train_metrics
        return report

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = mx.ablation_run(variants, run_variant, out_csv=out / "ablation.csv")
    n_ok = sum(1 for r in rows if r["status"] == "ok")
    logger.info("ablation: %d/%d variants ok -> %s", n_ok, len(rows), out / "ablation.csv")
    return 0


def cmd_plot(args) -> int:
    from . import plotting

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.what == "profile":
        profiles = {}
        for path in args.inputs:
            prof = _read_profile_csv(Path(path))
            profiles[Path(path).stem] = prof
        plotting.plot_distance_profile(profiles, out)
    elif args.what == "maps":
        gt, _ = load_elevation_map(args.inputs[0])
        pred, _ = load_elevation_map(args.inputs[1])
        plotting.plot_elevation_maps(gt, pred, out)
    elif args.what == "voxels":
        config = load_config(args.config, toy=args.toy)
        from . import voxels as vx

        vox = vx.build_voxel_grid(config.grid, z_min=config.voxel_z_min,
                                  z_max=config.voxel_z_max, z_res=config.voxel_z_res)
        table = vx.build_projection_table(vox, config.road_to_cam(), config.camera,
                                          config.model.resolved_stride)
        image = training.load_image_gray(Path(args.inputs[0]))
        plotting.plot_voxel_overlay(image, table, out)
    logger.info("plot written to %s", out)
    return 0


def _read_profile_csv(path: Path) -> "mx.DistanceProfile":
    import csv as _csv

    abs_err, n_valid, ranges = [], [], []
    with open(path, newline="") as fh:
        for row in _csv.DictReader(fh):
            abs_err.append(float(row["abs_err_cm"]) if row["abs_err_cm"] else None)
            n_valid.append(int(row["n_valid"]))
            ranges.append((int(row["row_start"]), int(row["row_end"])))
    return mx.DistanceProfile(abs_err=abs_err, n_valid=n_valid, row_ranges=ranges)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roadbev",
        description="Road-surface elevation reconstruction in bird's-eye view")
    parser.add_argument("--version", action="version", version=f"roadbev {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="render a synthetic scene to disk")
    _add_common(p)
    p.add_argument("--kind", choices=syn.SCENE_KINDS, default="speed_bump")
    p.add_argument("--density", type=float, default=2000.0,
                   help="point-cloud density (points/m^2)")
    p.set_defaults(fn=cmd_gen_scene)

    p = sub.add_parser("gen-labels", help="rasterize a road-frame point cloud to labels")
    _add_common(p)
    p.add_argument("--cloud", type=Path, required=True, help="text cloud: x y z per line")
    p.set_defaults(fn=cmd_gen_labels)

    p = sub.add_parser("train", help="train a model per the run config")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation sweep")
    _add_common(p)
    p.add_argument("--sweep", default="class-interval",
                   help="class-interval | stereo-volume | voxel-res | JSON file of overrides")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("plot", help="render PNG artifacts")
    _add_common(p)
    p.add_argument("--what", choices=["profile", "maps", "voxels"], required=True)
    p.add_argument("inputs", nargs="*", help="input files (profile CSVs, rbev maps, or an image)")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except RoadBevError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
