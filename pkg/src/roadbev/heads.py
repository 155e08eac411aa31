"""Elevation estimation heads: mono (BEV reshape + 2D convs) and stereo (BEV volume + 3D convs).

Both paths share the toy pyramid backbone and end in bin-classification logits
of shape (n_classes, ny, nx); `soft_argmin` reads continuous elevation out of
the softmax distribution over bin centers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .elevation import BinSpec, ElevationMap, LabelTensor
from .errors import ContractError, DomainError
from .voxels import FeatureVolume, ProjectionTable, VoxelGrid, query_features

VOLUME_MODES = ("multiply", "subtract")


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and switches for the estimation pipelines."""

    kind: str = "mono"
    channels: int = 64
    stage_widths: tuple[int, int] = (16, 32)
    head_width: int = 32
    head_depth: int = 2
    agg_width: int = 16
    n_agg_convs: int = 6
    n_hourglass: int = 3
    n_classes: int = 80
    feature_stride: int = 0  # 0 selects the per-kind default (mono 4, stereo 2)
    volume_mode: str = "multiply"
    sampling_mode: str = "nearest"
    loss_reduction: str = "mean"
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.kind not in ("mono", "stereo"):
            raise DomainError(f"model kind must be mono or stereo, got {self.kind!r}")
        if self.volume_mode not in VOLUME_MODES:
            raise DomainError(f"volume mode must be one of {VOLUME_MODES}, got {self.volume_mode!r}")
        if self.sampling_mode not in ("nearest", "bilinear"):
            raise DomainError(f"sampling mode must be nearest or bilinear, got {self.sampling_mode!r}")
        if self.loss_reduction not in ("sum", "mean"):
            raise DomainError(f"loss reduction must be sum or mean, got {self.loss_reduction!r}")
        if self.feature_stride not in (0, 1, 2, 4, 8):
            raise DomainError(f"feature stride must be 0 (default), 1, 2, 4 or 8, "
                              f"got {self.feature_stride}")
        if self.dtype not in ("float32", "float64"):
            raise DomainError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def resolved_stride(self) -> int:
        if self.feature_stride:
            return self.feature_stride
        return 4 if self.kind == "mono" else 2

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def with_stride(self, stride: int) -> "ModelConfig":
        return replace(self, feature_stride=stride)


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def _he(rng, shape, fan_in, dtype):
    return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _add_conv2d(store, name, cin, cout, k, rng, dtype):
    store.add(f"{name}.weight", _he(rng, (cout, cin, k, k), cin * k * k, dtype))
    store.add(f"{name}.bias", np.zeros(cout, dtype=dtype))


def _add_conv3d(store, name, cin, cout, k, rng, dtype):
    store.add(f"{name}.weight", _he(rng, (cout, cin, k, k, k), cin * k ** 3, dtype))
    store.add(f"{name}.bias", np.zeros(cout, dtype=dtype))


def _add_norm(store, name, c, dtype):
    store.add(f"{name}.gamma", np.ones(c, dtype=dtype))
    store.add(f"{name}.beta", np.zeros(c, dtype=dtype))


def _conv2d(store, name, x, stride=1, padding=0):
    return ad.conv2d(x, store[f"{name}.weight"], store[f"{name}.bias"],
                     stride=stride, padding=padding)


def _conv3d(store, name, x, stride=1, padding=0):
    return ad.conv3d(x, store[f"{name}.weight"], store[f"{name}.bias"],
                     stride=stride, padding=padding)


class StatsCollector:
    """Accumulates per-channel activation statistics during norm calibration."""

    def __init__(self):
        self.sums: dict[str, np.ndarray] = {}
        self.sq_sums: dict[str, np.ndarray] = {}
        self.counts: dict[str, int] = {}

    def observe(self, name: str, x: np.ndarray) -> None:
        axes = tuple(range(1, x.ndim))
        n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        s = x.sum(axis=axes, dtype=np.float64)
        sq = (x.astype(np.float64) ** 2).sum(axis=axes)
        if name not in self.sums:
            self.sums[name] = s
            self.sq_sums[name] = sq
            self.counts[name] = n
        else:
            self.sums[name] += s
            self.sq_sums[name] += sq
            self.counts[name] += n

    def finalize(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        out = {}
        for name, s in self.sums.items():
            n = self.counts[name]
            mean = s / n
            var = np.maximum(self.sq_sums[name] / n - mean ** 2, 1e-8)
            out[name] = (mean, var)
        return out


def _norm(store, name, x, buffers=None, collector=None):
    """Per-channel affine normalization with frozen statistics.

    Until calibration the buffers default to (0, 1). During calibration the
    layer normalizes with the current activation's own statistics (so deeper
    layers see sane inputs) while the collector accumulates them for freezing.
    """
    c = x.data.shape[0]
    if collector is not None:
        axes = tuple(range(1, x.data.ndim))
        mean = x.data.mean(axis=axes)
        var = np.maximum(x.data.var(axis=axes), 1e-8)
        collector.observe(name, x.data)
    elif buffers is not None and name in buffers:
        mean, var = buffers[name]
    else:
        mean, var = np.zeros(c), np.ones(c)
    return ad.channel_norm(x, store[f"{name}.gamma"], store[f"{name}.beta"], mean, var)


# ---------------------------------------------------------------------------
# toy pyramid backbone
# ---------------------------------------------------------------------------

def init_backbone(store: ParamStore, cfg: ModelConfig, rng, prefix: str = "backbone") -> None:
    """Two stride-2 stages; both are resized to the output stride, concatenated
    along channels and fused to `cfg.channels` with a 1x1 conv."""
    w1, w2 = cfg.stage_widths
    dt = cfg.np_dtype
    _add_conv2d(store, f"{prefix}.stage1.conv1", 3, w1, 3, rng, dt)
    _add_norm(store, f"{prefix}.stage1.norm1", w1, dt)
    _add_conv2d(store, f"{prefix}.stage1.conv2", w1, w1, 3, rng, dt)
    _add_norm(store, f"{prefix}.stage1.norm2", w1, dt)
    _add_conv2d(store, f"{prefix}.stage2.conv1", w1, w2, 3, rng, dt)
    _add_norm(store, f"{prefix}.stage2.norm1", w2, dt)
    _add_conv2d(store, f"{prefix}.stage2.conv2", w2, w2, 3, rng, dt)
    _add_norm(store, f"{prefix}.stage2.norm2", w2, dt)
    _add_conv2d(store, f"{prefix}.fuse", w1 + w2, cfg.channels, 1, rng, dt)


def backbone_forward(store: ParamStore, cfg: ModelConfig, image: Tensor,
                     prefix: str = "backbone", buffers=None, collector=None) -> Tensor:
    """Image (3, H, W) -> fused features (C, H/s, W/s)."""
    _c, h, w = image.data.shape
    stride = cfg.resolved_stride
    if h % 4 or w % 4 or h % stride or w % stride:
        raise ContractError(f"image size {h}x{w} not divisible by backbone strides (4, {stride})")
    x = _conv2d(store, f"{prefix}.stage1.conv1", image, stride=2, padding=1)
    x = ad.relu(_norm(store, f"{prefix}.stage1.norm1", x, buffers, collector))
    x = _conv2d(store, f"{prefix}.stage1.conv2", x, stride=1, padding=1)
    f1 = ad.relu(_norm(store, f"{prefix}.stage1.norm2", x, buffers, collector))
    x = _conv2d(store, f"{prefix}.stage2.conv1", f1, stride=2, padding=1)
    x = ad.relu(_norm(store, f"{prefix}.stage2.norm1", x, buffers, collector))
    x = _conv2d(store, f"{prefix}.stage2.conv2", x, stride=1, padding=1)
    f2 = ad.relu(_norm(store, f"{prefix}.stage2.norm2", x, buffers, collector))
    target = (h // stride, w // stride)
    if f1.data.shape[1:] != target:
        f1 = ad.nearest_resize2d(f1, target)
    if f2.data.shape[1:] != target:
        f2 = ad.nearest_resize2d(f2, target)
    return _conv2d(store, f"{prefix}.fuse", ad.concat_channel([f1, f2]))


# ---------------------------------------------------------------------------
# BEV reshape and mono head
# ---------------------------------------------------------------------------

def reshape_to_bev(vol: FeatureVolume):
    """(C, nz, ny, nx) voxel features -> (C*nz, ny, nx); element (c, k, i, j)
    lands at channel c*nz + k. Lossless."""
    data = vol.data
    c, nz, ny, nx = (data.data.shape if isinstance(data, Tensor) else data.shape)
    if isinstance(data, Tensor):
        return ad.reshape(data, (c * nz, ny, nx))
    return data.reshape(c * nz, ny, nx)


def unreshape_from_bev(bev, nz: int):
    """Inverse of `reshape_to_bev`."""
    data = bev.data if isinstance(bev, Tensor) else bev
    cn, ny, nx = data.shape
    return data.reshape(cn // nz, nz, ny, nx)


def init_mono_head(store: ParamStore, cfg: ModelConfig, in_channels: int, rng,
                   prefix: str = "mono_head") -> None:
    dt = cfg.np_dtype
    hw = cfg.head_width
    _add_conv2d(store, f"{prefix}.reduce", in_channels, hw, 1, rng, dt)
    for i in range(cfg.head_depth):
        _add_conv2d(store, f"{prefix}.block{i}", hw, hw, 3, rng, dt)
        _add_norm(store, f"{prefix}.norm{i}", hw, dt)
    _add_conv2d(store, f"{prefix}.classify", hw, cfg.n_classes, 1, rng, dt)


def mono_head_forward(store: ParamStore, cfg: ModelConfig, bev: Tensor,
                      prefix: str = "mono_head", buffers=None, collector=None) -> Tensor:
    x = ad.relu(_conv2d(store, f"{prefix}.reduce", bev))
    for i in range(cfg.head_depth):
        x = _conv2d(store, f"{prefix}.block{i}", x, padding=1)
        x = ad.relu(_norm(store, f"{prefix}.norm{i}", x, buffers, collector))
    return _conv2d(store, f"{prefix}.classify", x)


# ---------------------------------------------------------------------------
# stereo volume and aggregation
# ---------------------------------------------------------------------------

@dataclass
class BevVolume:
    """Similarity volume between left and right voxel features (C, nz, ny, nx)."""

    data: Tensor
    valid: np.ndarray

    @property
    def array(self) -> np.ndarray:
        return self.data.data if isinstance(self.data, Tensor) else self.data


def build_bev_volume(left: FeatureVolume, right: FeatureVolume,
                     mode: str = "multiply") -> BevVolume:
    """Point-wise multiply (correlation) or subtract volume; voxels invalid in
    either view are zeroed."""
    if mode not in VOLUME_MODES:
        raise DomainError(f"volume mode must be one of {VOLUME_MODES}, got {mode!r}")
    lshape = left.array.shape
    rshape = right.array.shape
    if lshape != rshape:
        raise ContractError(f"left {lshape} and right {rshape} voxel features differ")
    l = left.data if isinstance(left.data, Tensor) else Tensor(left.data)
    r = right.data if isinstance(right.data, Tensor) else Tensor(right.data)
    data = ad.mul(l, r) if mode == "multiply" else ad.sub(l, r)
    joint = left.valid & right.valid
    data = ad.mul(data, joint[None].astype(l.data.dtype))
    return BevVolume(data=data, valid=joint)


def init_stereo_aggregation(store: ParamStore, cfg: ModelConfig, rng,
                            prefix: str = "stereo_agg") -> None:
    dt = cfg.np_dtype
    aw = cfg.agg_width
    cin = cfg.channels
    for i in range(cfg.n_agg_convs):
        _add_conv3d(store, f"{prefix}.conv{i}", cin if i == 0 else aw, aw, 3, rng, dt)
        _add_norm(store, f"{prefix}.norm{i}", aw, dt)
    for i in range(cfg.n_hourglass):
        _add_conv3d(store, f"{prefix}.hourglass{i}.down", aw, aw, 3, rng, dt)
        _add_norm(store, f"{prefix}.hourglass{i}.norm", aw, dt)
    _add_conv3d(store, f"{prefix}.collapse", aw, 1, 3, rng, dt)
    # zero-init collapse: aggregation starts from exactly uniform occupancy
    store[f"{prefix}.collapse.weight"].data[:] = 0.0


def stereo_aggregate(store: ParamStore, cfg: ModelConfig, volume: BevVolume,
                     prefix: str = "stereo_agg", buffers=None, collector=None) -> Tensor:
    """3D-conv stack + hourglasses reduce the volume to one channel; the vertical
    proposal axis is then linearly resized to n_classes."""
    x = volume.data
    for i in range(cfg.n_agg_convs):
        x = _conv3d(store, f"{prefix}.conv{i}", x, padding=1)
        x = ad.relu(_norm(store, f"{prefix}.norm{i}", x, buffers, collector))
    for i in range(cfg.n_hourglass):
        inner = _conv3d(store, f"{prefix}.hourglass{i}.down", x, stride=2, padding=1)
        inner = ad.relu(_norm(store, f"{prefix}.hourglass{i}.norm", inner, buffers, collector))
        up = ad.linear_resize3d(inner, x.data.shape[1:])
        x = ad.add(x, up)
    x = _conv3d(store, f"{prefix}.collapse", x, padding=1)
    _one, nz, ny, nx = x.data.shape
    x = ad.reshape(x, (nz, ny, nx))
    return ad.linear_interp_axis(x, cfg.n_classes, axis=0)


# ---------------------------------------------------------------------------
# readout and loss
# ---------------------------------------------------------------------------

def soft_argmin(logits, bins: BinSpec) -> ElevationMap:
    """Expectation of bin centers under softmax(logits): continuous elevation (cm).

    Output mask is all-ones (predictions are dense). The all-float64 readout
    keeps the symmetric-uniform case at 0 to near machine precision.
    """
    z = (logits.data if isinstance(logits, Tensor) else np.asarray(logits)).astype(np.float64)
    if z.ndim != 3 or z.shape[0] != bins.n_classes:
        raise ContractError(f"logits {z.shape} do not match {bins.n_classes} bins")
    z = z - z.max(axis=0, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=0, keepdims=True)
    values = (bins.centers[:, None, None] * p).sum(axis=0)
    return ElevationMap(values, np.ones(values.shape, dtype=bool))


def masked_ce_loss(logits: Tensor, labels: LabelTensor, reduction: str = "mean") -> Tensor:
    """Cross entropy between logits and one-hot labels over mask-valid cells."""
    onehot = labels.onehot.astype(logits.data.dtype)
    return ad.masked_cross_entropy(logits, onehot, labels.mask, reduction=reduction)


# ---------------------------------------------------------------------------
# full models
# ---------------------------------------------------------------------------

def prepare_image(image: np.ndarray, dtype) -> np.ndarray:
    """Grayscale (H, W) in [0, 1] -> zero-centered (3, H, W)."""
    if image.ndim == 2:
        image = np.repeat(image[None], 3, axis=0)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"expected (H, W) or (3, H, W) image, got {image.shape}")
    return (image - 0.5).astype(dtype)


class MonoModel:
    """Single-image pipeline: backbone -> voxel query -> BEV reshape -> 2D head."""

    kind = "mono"

    def __init__(self, cfg: ModelConfig, bins: BinSpec, vox: VoxelGrid, rng):
        if cfg.kind != "mono":
            raise ContractError(f"MonoModel needs kind=mono config, got {cfg.kind}")
        if bins.n_classes != cfg.n_classes:
            raise ContractError(
                f"bins ({bins.n_classes}) and model ({cfg.n_classes}) class counts differ")
        self.cfg = cfg
        self.bins = bins
        self.vox = vox
        self.buffers: dict = {}
        self.store = ParamStore()
        init_backbone(self.store, cfg, rng)
        init_mono_head(self.store, cfg, cfg.channels * vox.nz, rng)

    def forward(self, image: np.ndarray, table: ProjectionTable,
                collector: StatsCollector | None = None) -> Tensor:
        x = Tensor(prepare_image(image, self.cfg.np_dtype))
        fm = backbone_forward(self.store, self.cfg, x,
                              buffers=self.buffers, collector=collector)
        vol = query_features(fm, table, mode=self.cfg.sampling_mode)
        bev = reshape_to_bev(vol)
        return mono_head_forward(self.store, self.cfg, bev,
                                 buffers=self.buffers, collector=collector)

    def loss(self, logits: Tensor, labels: LabelTensor) -> Tensor:
        return masked_ce_loss(logits, labels, reduction=self.cfg.loss_reduction)

    def predict(self, image: np.ndarray, table: ProjectionTable) -> ElevationMap:
        with ad.no_grad():
            logits = self.forward(image, table)
        return soft_argmin(logits, self.bins)


class StereoModel:
    """Stereo pipeline: shared backbone -> two voxel queries -> BEV volume -> 3D aggregation."""

    kind = "stereo"

    def __init__(self, cfg: ModelConfig, bins: BinSpec, vox: VoxelGrid, rng):
        if cfg.kind != "stereo":
            raise ContractError(f"StereoModel needs kind=stereo config, got {cfg.kind}")
        if bins.n_classes != cfg.n_classes:
            raise ContractError(
                f"bins ({bins.n_classes}) and model ({cfg.n_classes}) class counts differ")
        self.cfg = cfg
        self.bins = bins
        self.vox = vox
        self.buffers: dict = {}
        self.store = ParamStore()
        init_backbone(self.store, cfg, rng)
        init_stereo_aggregation(self.store, cfg, rng)

    def forward(self, left: np.ndarray, right: np.ndarray,
                table_left: ProjectionTable, table_right: ProjectionTable,
                collector: StatsCollector | None = None) -> Tensor:
        dt = self.cfg.np_dtype
        fl = backbone_forward(self.store, self.cfg, Tensor(prepare_image(left, dt)),
                              buffers=self.buffers, collector=collector)
        fr = backbone_forward(self.store, self.cfg, Tensor(prepare_image(right, dt)),
                              buffers=self.buffers, collector=collector)
        vl = query_features(fl, table_left, mode=self.cfg.sampling_mode)
        vr = query_features(fr, table_right, mode=self.cfg.sampling_mode)
        volume = build_bev_volume(vl, vr, mode=self.cfg.volume_mode)
        return stereo_aggregate(self.store, self.cfg, volume,
                                buffers=self.buffers, collector=collector)

    def loss(self, logits: Tensor, labels: LabelTensor) -> Tensor:
        return masked_ce_loss(logits, labels, reduction=self.cfg.loss_reduction)

    def predict(self, left: np.ndarray, right: np.ndarray,
                table_left: ProjectionTable, table_right: ProjectionTable) -> ElevationMap:
        with ad.no_grad():
            logits = self.forward(left, right, table_left, table_right)
        return soft_argmin(logits, self.bins)
