"""PNG artifacts: distance-profile chart, elevation/residual maps, voxel overlay."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .elevation import ElevationMap
from .metrics import DistanceProfile
from .voxels import ProjectionTable


def plot_distance_profile(profiles: dict[str, DistanceProfile], path: str | Path,
                          segment_length_m: float = 0.33) -> None:
    """Per-segment mean absolute error vs distance, one line per label."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, prof in profiles.items():
        xs, ys = [], []
        for k, err in enumerate(prof.abs_err):
            if err is not None:
                xs.append((k + 0.5) * segment_length_m)
                ys.append(err)
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel("distance ahead within ROI (m)")
    ax.set_ylabel("abs. elevation error (cm)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_elevation_maps(gt: ElevationMap, pred: ElevationMap, path: str | Path) -> None:
    """GT, prediction and residual (GT - prediction) as color maps."""
    residual = np.where(gt.mask, gt.values - pred.values, np.nan)
    gt_vals = np.where(gt.mask, gt.values, np.nan)
    lim = max(1.0, np.nanmax(np.abs(gt_vals)) if gt.mask.any() else 1.0,
              np.abs(pred.values).max())
    fig, axes = plt.subplots(1, 3, figsize=(10, 4))
    panels = [("GT (cm)", gt_vals, lim), ("estimate (cm)", pred.values, lim),
              ("residual (cm)", residual, None)]
    for ax, (title, data, vlim) in zip(axes, panels):
        v = vlim if vlim is not None else max(1e-6, np.nanmax(np.abs(data)))
        im = ax.imshow(data, origin="lower", cmap="RdYlBu_r", vmin=-v, vmax=v,
                       aspect="auto")
        ax.set_title(title)
        ax.set_xlabel("lateral cell")
        ax.set_ylabel("longitudinal cell")
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_voxel_overlay(image: np.ndarray, table: ProjectionTable, path: str | Path,
                       column_step: int = 8) -> None:
    """Projected voxel columns drawn over the image (vertical stacks as line segments)."""
    fig, ax = plt.subplots(figsize=(8, 5))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1)
    stride = table.feature_stride
    nz, ny, nx = table.voxel_shape
    for i in range(0, ny, column_step):
        for j in range(0, nx, column_step):
            valid = table.valid[:, i, j]
            if valid.sum() < 2:
                continue
            pix = table.coords[:, i, j][valid] * stride
            ax.plot(pix[:, 0], pix[:, 1], color="red", linewidth=0.7, alpha=0.6)
    ax.set_xlim(0, image.shape[1])
    ax.set_ylim(image.shape[0], 0)
    ax.set_title("voxel columns in image view")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
