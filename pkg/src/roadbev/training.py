"""Training loop, evaluation, synthetic dataset wiring and sample I/O."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import synthetic as syn
from . import voxels as vx
from .config import RunConfig, write_resolved
from .elevation import ElevationMap, elevation_to_labels, generate_gt, load_point_cloud_text
from .errors import DataError
from .geometry import Frame, FramedPoints
from .heads import MonoModel, StereoModel
from .metrics import MetricAccumulator, MetricReport
from .seeding import rng_for

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    checkpoint_path: Path | None
    log_rows: list
    train_metrics: MetricReport | None
    eval_metrics: MetricReport | None
    out_dir: Path | None = None
    eval_rows: list = field(default_factory=list)


def build_model(config: RunConfig):
    """Model + projection tables for the configured rig."""
    vox = vx.build_voxel_grid(config.grid, z_min=config.voxel_z_min,
                              z_max=config.voxel_z_max, z_res=config.voxel_z_res)
    stride = config.model.resolved_stride
    init_rng = rng_for(config.seed, "init")
    if config.model.kind == "mono":
        model = MonoModel(config.model, config.bins, vox, init_rng)
        tables = (vx.cached_projection_table(vox, config.road_to_cam(), config.camera, stride),)
    else:
        model = StereoModel(config.model, config.bins, vox, init_rng)
        tables = (
            vx.cached_projection_table(vox, config.road_to_cam(), config.camera, stride),
            vx.cached_projection_table(vox, config.road_to_right_cam(), config.camera, stride),
        )
    return model, tables


def build_datasets(config: RunConfig):
    """(train, eval) sample lists per the dataset section."""
    if config.dataset_kind == "disk":
        root = Path(config.dataset_path)
        sample_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        if not sample_dirs:
            raise DataError(f"dataset path {root} holds no sample directories")
        samples = [load_sample_dir(p, config) for p in sample_dirs]
        n_eval = min(config.eval_scenes, max(0, len(samples) - 1))
        return samples[:len(samples) - n_eval], samples[len(samples) - n_eval:]

    right = config.road_to_right_cam() if config.model.kind == "stereo" else None
    cam_to_road = config.cam_to_road()
    right_c2r = None
    if right is not None:
        from .geometry import inverse
        right_c2r = inverse(right)
    tex_kw = dict(texture_octaves=config.texture_octaves,
                  texture_base_cell=config.texture_base_cell)
    train = syn.make_dataset(config.n_scenes, config.scene_kinds, config.seed,
                             config.grid, config.camera, cam_to_road, right_c2r,
                             n_iters=config.n_march_iters, **tex_kw)
    eval_seed = int(rng_for(config.seed, "eval_dataset").integers(2 ** 31))
    evals = syn.make_dataset(config.eval_scenes, config.scene_kinds, eval_seed,
                             config.grid, config.camera, cam_to_road, right_c2r,
                             n_iters=config.n_march_iters,
                             **tex_kw) if config.eval_scenes else []
    return train, evals


def forward_loss(model, sample: syn.SyntheticSample, tables):
    labels = elevation_to_labels(sample.gt, model.bins)
    if isinstance(model, MonoModel):
        logits = model.forward(sample.left, tables[0])
    else:
        if sample.right is None:
            raise DataError("stereo model needs a right image; sample has none")
        logits = model.forward(sample.left, sample.right, tables[0], tables[1])
    return model.loss(logits, labels)


def calibrate_norm_stats(model, samples, tables, n_samples: int = 4) -> None:
    """Freeze normalization statistics from a few forward passes (run once,
    before the first optimizer step; deterministic)."""
    from .heads import StatsCollector

    collector = StatsCollector()
    with ad.no_grad():
        for sample in samples[:n_samples]:
            if isinstance(model, MonoModel):
                model.forward(sample.left, tables[0], collector=collector)
            else:
                model.forward(sample.left, sample.right, tables[0], tables[1],
                              collector=collector)
    model.buffers = collector.finalize()


def _buffers_to_arrays(model) -> dict:
    out = {}
    for name, (mean, var) in model.buffers.items():
        out[f"buffers/{name}.mean"] = mean
        out[f"buffers/{name}.var"] = var
    return out


def _buffers_from_arrays(arrays: dict) -> dict:
    buffers = {}
    for key, arr in arrays.items():
        if key.startswith("buffers/") and key.endswith(".mean"):
            name = key[len("buffers/"):-len(".mean")]
            var = arrays.get(f"buffers/{name}.var")
            if var is not None:
                buffers[name] = (arr, var)
    return buffers


def predict_sample(model, sample: syn.SyntheticSample, tables) -> ElevationMap:
    if isinstance(model, MonoModel):
        return model.predict(sample.left, tables[0])
    if sample.right is None:
        raise DataError("stereo model needs a right image; sample has none")
    return model.predict(sample.left, sample.right, tables[0], tables[1])


def evaluate(model, samples, tables) -> MetricReport:
    acc = MetricAccumulator()
    for sample in samples:
        t0 = time.perf_counter()
        pred = predict_sample(model, sample, tables)
        acc.add(pred, sample.gt, wall_time=time.perf_counter() - t0)
    return acc.report()


def train(config: RunConfig, out_dir: str | Path | None = None) -> TrainResult:
    """Deterministic sequential training; returns logs and final metrics.

    Writes (when `out_dir` is given): resolved_config.json, checkpoint.rbck,
    train_log.csv (step, epoch, loss, lr), eval_log.csv, timing.csv. Timing is
    kept out of train_log.csv so logs are byte-identical across repeat runs.
    """
    model, tables = build_model(config)
    train_samples, eval_samples = build_datasets(config)
    calibrate_norm_stats(model, train_samples, tables)
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    logger.info("training %s: %d samples, %d epochs, %d steps, %d parameter values",
                config.model.kind, n, config.epochs, total_steps, model.store.n_values())

    log_rows: list = []
    eval_rows: list = []
    timings: list = []
    step = 0
    for epoch in range(config.epochs):
        order = rng_for(config.seed, f"batch/{epoch}").permutation(n)
        for b0 in range(0, n, config.batch_size):
            batch = order[b0:b0 + config.batch_size]
            t0 = time.perf_counter()
            model.store.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                loss = forward_loss(model, train_samples[idx], tables)
                scaled = ad.mul(loss, 1.0 / len(batch))
                scaled.backward()
                batch_loss += loss.item() / len(batch)
            lr_scale = ad.one_cycle_scale(step, total_steps, config.warmup_frac)
            ad.adamw_step(model.store, lr=config.lr * lr_scale, betas=config.betas,
                          weight_decay=config.weight_decay)
            log_rows.append({"step": step, "epoch": epoch,
                             "loss": repr(batch_loss), "lr": repr(config.lr * lr_scale)})
            timings.append({"step": step, "wall_s": time.perf_counter() - t0})
            step += 1
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            report = evaluate(model, eval_samples or train_samples, tables)
            row = {k: repr(v) if isinstance(v, float) else v
                   for k, v in report.as_dict().items()}
            row.pop("wall_s_per_frame")  # timings live in timing.csv only
            eval_rows.append({"epoch": epoch,
                              "split": "eval" if eval_samples else "train", **row})
            logger.info("epoch %d: eval abs_err %.4f cm", epoch, report.abs_err)

    train_metrics = evaluate(model, train_samples, tables)
    eval_metrics = evaluate(model, eval_samples, tables) if eval_samples else None

    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_resolved(config, out_dir)
        checkpoint_path = out_dir / "checkpoint.rbck"
        ad.save_checkpoint(checkpoint_path, model.store,
                           meta={"model_kind": config.model.kind, "seed": config.seed},
                           extra=_buffers_to_arrays(model))
        _write_csv(out_dir / "train_log.csv", ["step", "epoch", "loss", "lr"], log_rows)
        _write_csv(out_dir / "eval_log.csv",
                   ["epoch", "split", "abs_err_cm", "rmse_cm", "frac_gt_half",
                    "n_valid"], eval_rows)
        _write_csv(out_dir / "timing.csv", ["step", "wall_s"],
                   [{"step": r["step"], "wall_s": repr(r["wall_s"])} for r in timings])
        (out_dir / "final_metrics.json").write_text(json.dumps({
            "train": train_metrics.as_dict(),
            "eval": eval_metrics.as_dict() if eval_metrics else None,
        }, indent=2, sort_keys=True) + "\n")

    return TrainResult(checkpoint_path=checkpoint_path, log_rows=log_rows,
                       train_metrics=train_metrics, eval_metrics=eval_metrics,
                       out_dir=Path(out_dir) if out_dir else None, eval_rows=eval_rows)


def restore_model(config: RunConfig, checkpoint_path: str | Path):
    model, tables = build_model(config)
    arrays, meta = ad.load_checkpoint(checkpoint_path)
    ad.restore_into(model.store, arrays, meta)
    model.buffers = _buffers_from_arrays(arrays)
    return model, tables, meta


def _write_csv(path: Path, columns: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# sample directories (also the documented on-disk format for external data)
# ---------------------------------------------------------------------------

def load_image_gray(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def load_pose_json(path: Path) -> dict:
    try:
        pose = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read pose file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("roll", "pitch"):
        if key not in pose:
            raise DataError(f"{path}: missing key {key!r}")
    pose.setdefault("camera_height", 1.10)
    return pose


def load_point_cloud_pcd(path: Path) -> FramedPoints:
    """Minimal ASCII-PCD reader: takes the first three fields of each data line."""
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read point cloud {path}: {exc}") from exc
    data_start = None
    for i, line in enumerate(lines):
        if line.strip().lower().startswith("data"):
            if "ascii" not in line.lower():
                raise DataError(f"{path}: only ascii PCD data is supported")
            data_start = i + 1
            break
    if data_start is None:
        raise DataError(f"{path}: no DATA section found")
    rows = []
    for line in lines[data_start:]:
        parts = line.split()
        if len(parts) >= 3:
            rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
    return FramedPoints(np.array(rows, dtype=np.float64).reshape(-1, 3), Frame.ROAD)


def load_sample_dir(path: str | Path, config: RunConfig) -> syn.SyntheticSample:
    """Load a sample directory: left.png [right.png] cloud.txt|cloud.pcd pose.json.

    The point cloud is road-frame; GT is rasterized onto the configured grid.
    This loader defines its own pose JSON ({roll, pitch, camera_height}); it is
    not validated against any external dataset's native format.
    """
    path = Path(path)
    left_path = path / "left.png"
    if not left_path.exists():
        raise DataError(f"sample {path} is missing left.png")
    left = load_image_gray(left_path)
    right = None
    right_path = path / "right.png"
    if config.model.kind == "stereo":
        if not right_path.exists():
            raise DataError(f"sample {path} is missing right.png (required for stereo)")
        right = load_image_gray(right_path)
    elif right_path.exists():
        right = load_image_gray(right_path)

    cloud_txt = path / "cloud.txt"
    cloud_pcd = path / "cloud.pcd"
    if cloud_txt.exists():
        points = load_point_cloud_text(cloud_txt)
    elif cloud_pcd.exists():
        points = load_point_cloud_pcd(cloud_pcd)
    else:
        raise DataError(f"sample {path} is missing cloud.txt or cloud.pcd")

    pose_path = path / "pose.json"
    if not pose_path.exists():
        raise DataError(f"sample {path} is missing pose.json")
    pose = load_pose_json(pose_path)

    gt = generate_gt(points, config.grid)
    return syn.SyntheticSample(left=left, right=right, gt=gt,
                               descriptor={"path": str(path), "pose": pose})
