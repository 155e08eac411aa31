"""Horizontal ROI grid, elevation bins, GT rasterization and the elevation-map file format.

Grid cells are half-open intervals [lo, hi) in both directions; a boundary point
belongs to the lower-index cell. Cell (i, j) indexes longitudinal row i and
lateral column j. Elevation values are centimeters everywhere; point inputs are
meters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, DomainError
from .geometry import Frame, FramedPoints

RBEV_MAGIC = b"RBEV"
RBEV_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    """Horizontal ROI discretization: origin + cell count x resolution."""

    x_min: float = -1.0
    y_min: float = 2.1
    resolution: float = 0.03
    nx: int = 64
    ny: int = 164

    def __post_init__(self) -> None:
        if self.resolution <= 0:
            raise DomainError(f"grid resolution must be positive, got {self.resolution}")
        if self.nx < 1 or self.ny < 1:
            raise DomainError(f"grid needs at least one cell, got {self.ny}x{self.nx}")

    @property
    def x_max(self) -> float:
        return self.x_min + self.nx * self.resolution

    @property
    def y_max(self) -> float:
        return self.y_min + self.ny * self.resolution

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)


def cell_centers(grid: GridSpec) -> np.ndarray:
    """Centers of all cells, shape (ny, nx, 2) holding (x, y) in meters."""
    xs = grid.x_min + (np.arange(grid.nx) + 0.5) * grid.resolution
    ys = grid.y_min + (np.arange(grid.ny) + 0.5) * grid.resolution
    out = np.empty((grid.ny, grid.nx, 2))
    out[:, :, 0] = xs[None, :]
    out[:, :, 1] = ys[:, None]
    return out


@dataclass(frozen=True)
class BinSpec:
    """Vertical elevation bins in centimeters."""

    e_min: float = -20.0
    e_max: float = 20.0
    n_classes: int = 80

    def __post_init__(self) -> None:
        if self.e_max <= self.e_min:
            raise DomainError(f"need e_max > e_min, got [{self.e_min}, {self.e_max}]")
        if self.n_classes < 2:
            raise DomainError(f"need at least 2 classes, got {self.n_classes}")

    @property
    def interval(self) -> float:
        return (self.e_max - self.e_min) / self.n_classes

    @property
    def centers(self) -> np.ndarray:
        return self.e_min + (np.arange(self.n_classes) + 0.5) * self.interval

    @classmethod
    def from_interval(cls, interval_cm: float, e_min: float = -20.0, e_max: float = 20.0) -> "BinSpec":
        n = int(round((e_max - e_min) / interval_cm))
        return cls(e_min=e_min, e_max=e_max, n_classes=n)


@dataclass
class ElevationMap:
    """Per-cell elevation in centimeters plus a binary validity mask.

    Masked-out cells carry 0.0 as a sentinel; the mask is authoritative and
    masked-out values are never read by loss or metrics.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ContractError(
                f"values {self.values.shape} and mask {self.mask.shape} must be equal 2-d shapes")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class LabelTensor:
    """One-hot class labels per cell: (n_classes, ny, nx) plus the copied mask."""

    onehot: np.ndarray
    mask: np.ndarray


def generate_gt(points: FramedPoints, grid: GridSpec) -> ElevationMap:
    """Rasterize road-frame points to a GT elevation map.

    A cell holds the mean Z (m converted to cm) of the points falling in it;
    its mask bit is set iff at least one point fell in. Per-cell sums are f64
    and follow a canonical order (cell, then x, y, z), so the result is
    bit-identical under any permutation of the input points and reproducible
    against a sequential per-point reference loop using the same order.
    """
    if points.frame != Frame.ROAD:
        raise DataError(f"GT rasterization needs road-frame points, got {points.frame}")
    p = points.xyz
    ny, nx = grid.ny, grid.nx
    sums = np.zeros(ny * nx)
    counts = np.zeros(ny * nx, dtype=np.int64)
    if len(points):
        jf = np.floor((p[:, 0] - grid.x_min) / grid.resolution)
        if_ = np.floor((p[:, 1] - grid.y_min) / grid.resolution)
        inside = (jf >= 0) & (jf < nx) & (if_ >= 0) & (if_ < ny)
        j = jf[inside].astype(np.int64)
        i = if_[inside].astype(np.int64)
        flat = i * nx + j
        kept = p[inside]
        order = np.lexsort((kept[:, 2], kept[:, 1], kept[:, 0], flat))
        z_cm = kept[order, 2] * 100.0
        np.add.at(sums, flat[order], z_cm)
        np.add.at(counts, flat, 1)
    mask = counts > 0
    values = np.zeros(ny * nx)
    values[mask] = sums[mask] / counts[mask]
    return ElevationMap(values.reshape(ny, nx), mask.reshape(ny, nx))


def elevation_to_labels(emap: ElevationMap, bins: BinSpec) -> LabelTensor:
    """Convert an elevation map to one-hot bin labels; out-of-range values clamp to the boundary bins."""
    if np.isnan(emap.values[emap.mask]).any():
        raise DataError("elevation map holds NaN under a valid mask bit")
    sane = np.where(emap.mask, emap.values, 0.0)
    cls = np.floor((sane - bins.e_min) / bins.interval)
    cls = np.clip(cls, 0, bins.n_classes - 1).astype(np.int64)
    onehot = np.zeros((bins.n_classes, *emap.shape), dtype=np.float32)
    ii, jj = np.nonzero(emap.mask)
    onehot[cls[ii, jj], ii, jj] = 1.0
    return LabelTensor(onehot, emap.mask.copy())


def save_elevation_map(path: str | Path, emap: ElevationMap, grid: GridSpec) -> None:
    """Write the binary elevation-map format (little-endian).

    Layout: magic `RBEV`, version u32, ny u32, nx u32, resolution f32 (m),
    x_min f32, y_min f32, then ny*nx f32 values (cm, row-major, row = longitudinal
    index), then ny*nx u8 mask.
    """
    if emap.shape != grid.shape:
        raise ContractError(f"map shape {emap.shape} does not match grid {grid.shape}")
    header = RBEV_MAGIC + struct.pack(
        "<IIIfff", RBEV_VERSION, grid.ny, grid.nx,
        grid.resolution, grid.x_min, grid.y_min)
    body = emap.values.astype("<f4").tobytes() + emap.mask.astype(np.uint8).tobytes()
    Path(path).write_bytes(header + body)


def load_elevation_map(path: str | Path) -> tuple[ElevationMap, GridSpec]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read elevation map {path}: {exc}") from exc
    if len(raw) < 28 or raw[:4] != RBEV_MAGIC:
        raise DataError(f"{path}: not an RBEV elevation map")
    version, ny, nx, res, x_min, y_min = struct.unpack("<IIIfff", raw[4:28])
    if version != RBEV_VERSION:
        raise DataError(f"{path}: unsupported RBEV version {version}")
    n = ny * nx
    expected = 28 + 4 * n + n
    if len(raw) != expected:
        raise DataError(f"{path}: truncated RBEV file ({len(raw)} bytes, expected {expected})")
    values = np.frombuffer(raw, dtype="<f4", count=n, offset=28).reshape(ny, nx)
    mask = np.frombuffer(raw, dtype=np.uint8, count=n, offset=28 + 4 * n).reshape(ny, nx)
    grid = GridSpec(x_min=float(x_min), y_min=float(y_min), resolution=float(res), nx=nx, ny=ny)
    return ElevationMap(values.astype(np.float64), mask.astype(bool)), grid


def load_point_cloud_text(path: str | Path) -> FramedPoints:
    """Read a plain-text road-frame cloud: one `x y z` triple (meters) per line.

    Blank lines and `#` comments are skipped.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read point cloud {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected `x y z`, got {line!r}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    xyz = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return FramedPoints(xyz, Frame.ROAD)


def save_point_cloud_text(path: str | Path, points: FramedPoints) -> None:
    lines = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in points.xyz]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
