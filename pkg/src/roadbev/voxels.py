"""Voxels of interest: 3D grid construction, projection tables, and feature queries.

The voxel stack spans the ROI horizontally and the elevation range vertically;
every voxel is an elevation proposal. Voxel centers are fixed relative to the
camera, so their pixel projections are precomputed once per (camera, stride)
and reused for every frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .elevation import GridSpec, cell_centers
from .errors import ContractError, DomainError
from .geometry import CameraModel, Frame, FramedPoints, RigidPose, project_points, transform_points

SAMPLING_MODES = ("nearest", "bilinear")


@dataclass(frozen=True)
class VoxelGrid:
    """Vertical stack of elevation-proposal voxels over the ROI grid.

    z_min/z_max/z_res are centimeters; `centers` holds road-frame voxel centers
    in meters with shape (nz, ny, nx, 3).
    """

    grid: GridSpec
    z_min: float
    z_max: float
    z_res: float
    nz: int
    centers: np.ndarray = field(repr=False)


def build_voxel_grid(grid: GridSpec, z_min: float = -20.0, z_max: float = 20.0,
                     z_res: float = 1.0) -> VoxelGrid:
    if z_res <= 0:
        raise DomainError(f"vertical voxel resolution must be positive, got {z_res}")
    if z_max <= z_min:
        raise DomainError(f"need z_max > z_min, got [{z_min}, {z_max}]")
    nz = int(round((z_max - z_min) / z_res))
    if nz < 1:
        raise DomainError(f"vertical range [{z_min}, {z_max}] too small for resolution {z_res}")
    horizontal = cell_centers(grid)
    z_layers = (z_min + (np.arange(nz) + 0.5) * z_res) / 100.0
    centers = np.empty((nz, grid.ny, grid.nx, 3))
    centers[..., 0] = horizontal[None, :, :, 0]
    centers[..., 1] = horizontal[None, :, :, 1]
    centers[..., 2] = z_layers[:, None, None]
    return VoxelGrid(grid=grid, z_min=z_min, z_max=z_max, z_res=z_res, nz=nz, centers=centers)


@dataclass
class ProjectionTable:
    """Per-voxel pixel coordinates at feature-map scale, plus a validity mask.

    coords are continuous pixels; entries are zeroed wherever the projection
    leaves the feature map or falls behind the camera, and `valid` is the
    single source of truth.
    """

    coords: np.ndarray
    valid: np.ndarray
    feature_stride: int
    feature_height: int
    feature_width: int
    _query_cache: dict = field(default_factory=dict, repr=False)

    @property
    def voxel_shape(self) -> tuple[int, int, int]:
        return self.valid.shape


def build_projection_table(vox: VoxelGrid, road_to_cam: RigidPose, cam: CameraModel,
                           feature_stride: int) -> ProjectionTable:
    """Project all voxel centers into the (downsampled) image plane."""
    if feature_stride not in (1, 2, 4, 8):
        raise DomainError(f"feature stride must be one of 1, 2, 4, 8, got {feature_stride}")
    if cam.width % feature_stride or cam.height % feature_stride:
        raise ContractError(
            f"image size {cam.width}x{cam.height} not divisible by stride {feature_stride}")
    pts = FramedPoints(vox.centers.reshape(-1, 3), Frame.ROAD)
    cam_pts = transform_points(pts, road_to_cam)
    uv, _depth, valid = project_points(cam_pts, cam)
    shape = (vox.nz, vox.grid.ny, vox.grid.nx)
    coords = (uv / feature_stride).reshape(*shape, 2)
    valid = valid.reshape(shape)
    coords[~valid] = 0.0
    return ProjectionTable(
        coords=coords, valid=valid, feature_stride=feature_stride,
        feature_height=cam.height // feature_stride,
        feature_width=cam.width // feature_stride)


_table_cache: dict = {}


def cached_projection_table(vox: VoxelGrid, road_to_cam: RigidPose, cam: CameraModel,
                            feature_stride: int) -> ProjectionTable:
    """Memoized `build_projection_table`; tables are immutable once built."""
    key = (
        vox.grid, vox.z_min, vox.z_max, vox.z_res, vox.nz,
        road_to_cam.rotation.tobytes(), road_to_cam.translation.tobytes(),
        cam, feature_stride,
    )
    table = _table_cache.get(key)
    if table is None:
        table = build_projection_table(vox, road_to_cam, cam, feature_stride)
        _table_cache[key] = table
    return table


@dataclass
class FeatureVolume:
    """Voxel features (C, nz, ny, nx); invalid voxels are exactly zero."""

    data: "ad.Tensor | np.ndarray"
    valid: np.ndarray

    @property
    def array(self) -> np.ndarray:
        return self.data.data if isinstance(self.data, ad.Tensor) else self.data


def _gather_plan(table: ProjectionTable, mode: str):
    """Flat source indices and weights for every valid voxel, cached per mode."""
    plan = table._query_cache.get(mode)
    if plan is not None:
        return plan
    wf, hf = table.feature_width, table.feature_height
    valid = table.valid.ravel()
    dst = np.flatnonzero(valid)
    u = table.coords[..., 0].ravel()[dst]
    v = table.coords[..., 1].ravel()[dst]
    if mode == "nearest":
        ui = np.clip(np.rint(u).astype(np.int64), 0, wf - 1)
        vi = np.clip(np.rint(v).astype(np.int64), 0, hf - 1)
        taps = [(vi * wf + ui, np.ones_like(u))]
    else:
        u0 = np.floor(u).astype(np.int64)
        v0 = np.floor(v).astype(np.int64)
        fu = u - u0
        fv = v - v0
        x0 = np.clip(u0, 0, wf - 1)
        x1 = np.clip(u0 + 1, 0, wf - 1)
        y0 = np.clip(v0, 0, hf - 1)
        y1 = np.clip(v0 + 1, 0, hf - 1)
        taps = [
            (y0 * wf + x0, (1 - fu) * (1 - fv)),
            (y0 * wf + x1, fu * (1 - fv)),
            (y1 * wf + x0, (1 - fu) * fv),
            (y1 * wf + x1, fu * fv),
        ]
    plan = (dst, taps)
    table._query_cache[mode] = plan
    return plan


def query_features(feature_map, table: ProjectionTable, mode: str = "nearest") -> FeatureVolume:
    """Fill voxels with the image feature at each center's projected pixel.

    `feature_map` is (C, H_f, W_f), as a numpy array or an autodiff Tensor;
    with a Tensor input the query participates in the graph and gradients
    scatter back to the feature map. Invalid voxels are zero-filled.
    """
    if mode not in SAMPLING_MODES:
        raise DomainError(f"sampling mode must be one of {SAMPLING_MODES}, got {mode!r}")
    is_tensor = isinstance(feature_map, ad.Tensor)
    fm = feature_map.data if is_tensor else np.asarray(feature_map)
    if fm.ndim != 3 or fm.shape[1] != table.feature_height or fm.shape[2] != table.feature_width:
        raise ContractError(
            f"feature map {fm.shape} does not match table "
            f"(C, {table.feature_height}, {table.feature_width})")
    c = fm.shape[0]
    nz, ny, nx = table.voxel_shape
    dst, taps = _gather_plan(table, mode)
    fm2 = fm.reshape(c, -1)
    gathered = np.zeros((c, nz * ny * nx), dtype=fm.dtype)
    for src, w in taps:
        gathered[:, dst] += fm2[:, src] * w.astype(fm.dtype)
    data = gathered.reshape(c, nz, ny, nx)
    if not is_tensor:
        return FeatureVolume(data=data, valid=table.valid.copy())

    hw = table.feature_height * table.feature_width

    def bwd(g):
        g2 = g.reshape(c, -1)[:, dst]
        gfm = np.zeros((c, hw), dtype=fm.dtype)
        for src, w in taps:
            weighted = g2 * w.astype(fm.dtype)
            for ch in range(c):
                gfm[ch] += np.bincount(src, weights=weighted[ch], minlength=hw)
        feature_map._accum(gfm.reshape(fm.shape))

    node = ad.make_node(data, (feature_map,), bwd)
    return FeatureVolume(data=node, valid=table.valid.copy())
