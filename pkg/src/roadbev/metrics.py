"""Evaluation metrics, the distance-wise error profile, and the ablation harness.

All metrics are computed over GT-valid cells only (predictions are dense, labels
are sparse). Wall time is reported per frame and is host-specific.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .elevation import ElevationMap
from .errors import ContractError, EvaluationError

ABLATION_CSV_COLUMNS = [
    "variant_id", "model_kind", "class_interval_cm", "n_classes", "voxel_res_cm",
    "feature_stride", "volume_mode", "abs_err_cm", "rmse_cm", "frac_gt_half",
    "n_valid", "wall_s_per_frame", "status",
]

CLASS_INTERVAL_SWEEP_CM = (2.0, 1.6, 1.0, 0.8, 0.5, 0.4)


@dataclass
class MetricReport:
    """abs err / RMSE / fraction of cells with error > 0.5 cm, over valid cells."""

    abs_err: float
    rmse: float
    frac_gt_half_cm: float
    n_valid: int
    wall_time_per_frame: float = math.nan

    def as_dict(self) -> dict:
        return {
            "abs_err_cm": self.abs_err,
            "rmse_cm": self.rmse,
            "frac_gt_half": self.frac_gt_half_cm,
            "n_valid": self.n_valid,
            "wall_s_per_frame": self.wall_time_per_frame,
        }


@dataclass
class DistanceProfile:
    """Mean absolute error per longitudinal segment (near to far).

    Empty segments report None (absent), not zero.
    """

    abs_err: list
    n_valid: list
    row_ranges: list = field(default_factory=list)


def _masked_errors(pred: ElevationMap, gt: ElevationMap) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and GT {gt.shape} shapes differ")
    return pred.values[gt.mask] - gt.values[gt.mask]


def _rmse(err: np.ndarray) -> float:
    # scale before squaring so subnormal errors cannot underflow to 0,
    # which would break the rmse >= abs_err power-mean inequality
    scale = float(np.abs(err).max())
    if scale == 0.0:
        return 0.0
    return scale * float(np.sqrt(((err / scale) ** 2).mean()))


def compute_metrics(pred: ElevationMap, gt: ElevationMap,
                    wall_time_per_frame: float = math.nan) -> MetricReport:
    """abs_err = mean |e|, rmse = sqrt(mean e^2), frac = mean [|e| > 0.5 cm]."""
    err = _masked_errors(pred, gt)
    if err.size == 0:
        raise EvaluationError("GT mask is empty: no cells to evaluate")
    abs_err = float(np.abs(err).mean())
    return MetricReport(
        abs_err=abs_err,
        # the power mean inequality holds exactly; keep it true at the
        # all-equal boundary where both sides round within one ulp
        rmse=max(_rmse(err), abs_err),
        frac_gt_half_cm=float((np.abs(err) > 0.5).mean()),
        n_valid=int(err.size),
        wall_time_per_frame=wall_time_per_frame)


class MetricAccumulator:
    """Pools per-cell errors across samples into one report."""

    def __init__(self):
        self.abs_sum = 0.0
        self.sq_sum = 0.0
        self.n_over = 0
        self.n = 0
        self.wall_time = 0.0
        self.frames = 0

    def add(self, pred: ElevationMap, gt: ElevationMap, wall_time: float = 0.0) -> None:
        err = _masked_errors(pred, gt)
        self.abs_sum += float(np.abs(err).sum())
        self.sq_sum += float((err ** 2).sum())
        self.n_over += int((np.abs(err) > 0.5).sum())
        self.n += err.size
        self.wall_time += wall_time
        self.frames += 1

    def report(self) -> MetricReport:
        if self.n == 0:
            raise EvaluationError("no valid cells accumulated")
        abs_err = self.abs_sum / self.n
        return MetricReport(
            abs_err=abs_err,
            rmse=max(math.sqrt(self.sq_sum / self.n), abs_err),
            frac_gt_half_cm=self.n_over / self.n,
            n_valid=self.n,
            wall_time_per_frame=self.wall_time / self.frames if self.frames else math.nan)


def segment_rows(ny: int, n_segments: int = 15) -> list[tuple[int, int]]:
    """Front-aligned partition of ny rows into n_segments (last may be short)."""
    seg = math.ceil(ny / n_segments)
    return [(k * seg, min((k + 1) * seg, ny)) for k in range(n_segments)]


def distance_profile(pred: ElevationMap, gt: ElevationMap,
                     n_segments: int = 15) -> DistanceProfile:
    """Masked mean |error| per longitudinal segment."""
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and GT {gt.shape} shapes differ")
    ranges = segment_rows(gt.shape[0], n_segments)
    abs_err: list = []
    n_valid: list = []
    for lo, hi in ranges:
        mask = gt.mask[lo:hi]
        n = int(mask.sum())
        n_valid.append(n)
        if n == 0:
            abs_err.append(None)
        else:
            err = pred.values[lo:hi][mask] - gt.values[lo:hi][mask]
            abs_err.append(float(np.abs(err).mean()))
    return DistanceProfile(abs_err=abs_err, n_valid=n_valid, row_ranges=ranges)


def profile_to_csv(profile: DistanceProfile, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment", "row_start", "row_end", "abs_err_cm", "n_valid"])
        for k, ((lo, hi), err, n) in enumerate(
                zip(profile.row_ranges, profile.abs_err, profile.n_valid)):
            writer.writerow([k, lo, hi, "" if err is None else repr(err), n])


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

def class_interval_sweep(intervals=CLASS_INTERVAL_SWEEP_CM) -> list[dict]:
    return [{"class_interval_cm": float(iv)} for iv in intervals]


def stereo_volume_sweep() -> list[dict]:
    """Feature resolution {1/4, 1/2} x volume {subtract, multiply}: 4 variants."""
    rows = []
    for stride in (4, 2):
        for mode in ("subtract", "multiply"):
            rows.append({"model.kind": "stereo", "model.feature_stride": stride,
                         "model.volume_mode": mode})
    return rows


def voxel_resolution_sweep(resolutions=(0.5, 1.0, 2.0)) -> list[dict]:
    return [{"voxel.z_res": float(r)} for r in resolutions]


def ablation_run(variants: list[tuple[str, "RunConfig"]], run_variant,
                 out_csv: str | Path | None = None) -> list[dict]:
    """Train/evaluate each (variant_id, config) with `run_variant` and collect rows.

    `run_variant(config) -> MetricReport`. A failing variant becomes a
    status=failed row; the sweep continues.
    """
    rows = []
    for variant_id, cfg in variants:
        interval = (cfg.bins.e_max - cfg.bins.e_min) / cfg.bins.n_classes
        row = {
            "variant_id": variant_id,
            "model_kind": cfg.model.kind,
            "class_interval_cm": repr(float(interval)),
            "n_classes": cfg.bins.n_classes,
            "voxel_res_cm": repr(float(cfg.voxel_z_res)),
            "feature_stride": cfg.model.resolved_stride,
            "volume_mode": cfg.model.volume_mode,
            "abs_err_cm": "", "rmse_cm": "", "frac_gt_half": "",
            "n_valid": "", "wall_s_per_frame": "", "status": "failed",
        }
        try:
            report = run_variant(cfg)
            row.update({
                "abs_err_cm": repr(report.abs_err),
                "rmse_cm": repr(report.rmse),
                "frac_gt_half": repr(report.frac_gt_half_cm),
                "n_valid": report.n_valid,
                "wall_s_per_frame": repr(report.wall_time_per_frame),
                "status": "ok",
            })
        except Exception as exc:  # a failed variant must not abort the sweep
            row["status"] = f"failed: {type(exc).__name__}"
        rows.append(row)
    if out_csv is not None:
        write_ablation_csv(rows, out_csv)
    return rows


def write_ablation_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
