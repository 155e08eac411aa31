"""Procedural road scenes with analytically known geometry.

A scene is a height field z(x, y) composed of simple primitives (bumps,
potholes, sinusoids, steps, cracks on a plane) plus a value-noise texture.
Views are rendered by intersecting camera rays with the height field via
fixed-point iteration; because the geometry is analytic, GT elevation maps are
exact and label error is zero.

All scene functions are deterministic given their seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .elevation import ElevationMap, GridSpec, cell_centers
from .errors import ContractError, DomainError
from .geometry import CameraModel, Frame, FramedPoints, RigidPose
from .seeding import rng_for

SCENE_KINDS = ("plane", "speed_bump", "pothole", "sinusoid", "step", "crack")

# parameter bounds (meters); chosen so any single scene stays within the
# +-20 cm elevation range of the voxel stack
MAX_BUMP_HEIGHT = 0.12
MAX_POTHOLE_DEPTH = 0.10
MAX_STEP_HEIGHT = 0.08
MAX_SINE_AMPLITUDE = 0.08
MIN_SINE_WAVELENGTH = 0.10
MAX_CRACK_DEPTH = 0.05
MAX_PLANE_OFFSET = 0.05


@dataclass(frozen=True)
class Plane:
    c: float = 0.0

    def height(self, x, y):
        return np.full(np.broadcast(x, y).shape, self.c)

    def grad(self, x, y):
        shape = np.broadcast(x, y).shape
        return np.zeros(shape), np.zeros(shape)


@dataclass(frozen=True)
class SpeedBump:
    """h * cos^2(pi (y - y0) / L) inside |y - y0| < L/2."""

    height_m: float
    y0: float
    length: float

    def height(self, x, y):
        u = np.pi * (np.asarray(y) - self.y0) / self.length
        inside = np.abs(np.asarray(y) - self.y0) < self.length / 2
        return np.where(inside, self.height_m * np.cos(u) ** 2, 0.0) * np.ones_like(np.asarray(x), dtype=float)

    def grad(self, x, y):
        y = np.asarray(y)
        u = np.pi * (y - self.y0) / self.length
        inside = np.abs(y - self.y0) < self.length / 2
        gy = np.where(inside, -self.height_m * np.pi / self.length * np.sin(2 * u), 0.0)
        return np.zeros(np.broadcast(x, y).shape), gy * np.ones_like(np.asarray(x), dtype=float)


@dataclass(frozen=True)
class Pothole:
    """-d * exp(-((x-x0)^2 + (y-y0)^2) / (2 sigma^2))."""

    depth: float
    x0: float
    y0: float
    sigma: float

    def _bowl(self, x, y):
        r2 = (np.asarray(x) - self.x0) ** 2 + (np.asarray(y) - self.y0) ** 2
        return -self.depth * np.exp(-r2 / (2 * self.sigma ** 2))

    def height(self, x, y):
        return self._bowl(x, y)

    def grad(self, x, y):
        z = self._bowl(x, y)
        gx = -z * (np.asarray(x) - self.x0) / self.sigma ** 2
        gy = -z * (np.asarray(y) - self.y0) / self.sigma ** 2
        return gx, gy


@dataclass(frozen=True)
class Sinusoid:
    """a * sin(2 pi (y - y0) / wavelength)."""

    amplitude: float
    wavelength: float
    y0: float = 0.0

    def height(self, x, y):
        z = self.amplitude * np.sin(2 * np.pi * (np.asarray(y) - self.y0) / self.wavelength)
        return z * np.ones_like(np.asarray(x), dtype=float)

    def grad(self, x, y):
        k = 2 * np.pi / self.wavelength
        gy = self.amplitude * k * np.cos(k * (np.asarray(y) - self.y0))
        return np.zeros(np.broadcast(x, y).shape), gy * np.ones_like(np.asarray(x), dtype=float)


@dataclass(frozen=True)
class Step:
    """h for y > y0, else 0; gradient treated as 0 away from the jump."""

    height_m: float
    y0: float

    def height(self, x, y):
        return np.where(np.asarray(y) > self.y0, self.height_m, 0.0) * np.ones_like(
            np.asarray(x), dtype=float)

    def grad(self, x, y):
        shape = np.broadcast(x, y).shape
        return np.zeros(shape), np.zeros(shape)


@dataclass(frozen=True)
class Crack:
    """Narrow negative Gaussian ridge along the line through (x0, y0) at `angle`
    from the longitudinal axis."""

    depth: float
    width: float
    x0: float
    y0: float
    angle: float = 0.0

    def _signed_dist(self, x, y):
        return ((np.asarray(x) - self.x0) * math.cos(self.angle)
                - (np.asarray(y) - self.y0) * math.sin(self.angle))

    def height(self, x, y):
        s = self._signed_dist(x, y)
        return -self.depth * np.exp(-s ** 2 / (2 * self.width ** 2))

    def grad(self, x, y):
        s = self._signed_dist(x, y)
        z = -self.depth * np.exp(-s ** 2 / (2 * self.width ** 2))
        dz_ds = -z * s / self.width ** 2
        return dz_ds * math.cos(self.angle), dz_ds * (-math.sin(self.angle))


@dataclass(frozen=True)
class HeightField:
    """Sum of primitives; evaluation and gradient are analytic and vectorized."""

    primitives: tuple
    seed: int = 0

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        z = np.zeros(np.broadcast(x, y).shape)
        for p in self.primitives:
            z = z + p.height(x, y)
        return z

    def grad(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        shape = np.broadcast(x, y).shape
        gx = np.zeros(shape)
        gy = np.zeros(shape)
        for p in self.primitives:
            px, py = p.grad(x, y)
            gx = gx + px
            gy = gy + py
        return gx, gy


_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xBF58476D1CE4E5B9)
_MIX3 = np.uint64(0x94D049BB133111EB)


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash -> [0, 1)."""
    seed_mix = np.uint64((seed * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF)
    h = (ix.astype(np.uint64) * _MIX1) ^ (iy.astype(np.uint64) * _MIX2) ^ seed_mix
    h ^= h >> np.uint64(30)
    h *= _MIX2
    h ^= h >> np.uint64(27)
    h *= _MIX3
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


@dataclass(frozen=True)
class TextureField:
    """Multi-octave value noise over the road plane, intensity in [0, 1].

    The default finest octave is ~1 cm so stereo matching sees photometric
    gradients at feature-map scale.
    """

    seed: int
    octaves: int = 5
    base_cell: float = 0.16

    def intensity(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        total = np.zeros(np.broadcast(x, y).shape)
        amp_sum = 0.0
        for o in range(self.octaves):
            cell = self.base_cell / (2 ** o)
            amp = 0.5 ** o
            gx = x / cell
            gy = y / cell
            ix = np.floor(gx).astype(np.int64)
            iy = np.floor(gy).astype(np.int64)
            fx = _fade(gx - ix)
            fy = _fade(gy - iy)
            oseed = self.seed * 1000003 + o * 7919
            v00 = _hash01(ix, iy, oseed)
            v10 = _hash01(ix + 1, iy, oseed)
            v01 = _hash01(ix, iy + 1, oseed)
            v11 = _hash01(ix + 1, iy + 1, oseed)
            total += amp * ((v00 * (1 - fx) + v10 * fx) * (1 - fy)
                            + (v01 * (1 - fx) + v11 * fx) * fy)
            amp_sum += amp
        return total / amp_sum


@dataclass(frozen=True)
class ConstantTexture:
    """Uniform albedo; reserved for negative stereo tests."""

    value: float = 0.5

    def intensity(self, x, y):
        return np.full(np.broadcast(x, y).shape, self.value)


def _check_range(name, value, lo, hi):
    if not (lo <= value <= hi):
        raise DomainError(f"{name} = {value} outside [{lo}, {hi}]")


def make_scene(kind: str, seed: int, grid: GridSpec | None = None,
               params: dict | None = None, texture_octaves: int = 5,
               texture_base_cell: float = 0.16) -> tuple[HeightField, TextureField]:
    """Deterministic scene of the given kind; random parameters are drawn inside
    documented bounds, or supplied explicitly via `params`."""
    if kind not in SCENE_KINDS:
        raise DomainError(f"scene kind must be one of {SCENE_KINDS}, got {kind!r}")
    grid = grid or GridSpec()
    rng = rng_for(seed, f"scene/{kind}")
    p = dict(params or {})

    def draw(name, lo, hi):
        if name in p:
            return float(p[name])
        return float(rng.uniform(lo, hi))

    y_mid_lo = grid.y_min + 0.25 * (grid.y_max - grid.y_min)
    y_mid_hi = grid.y_min + 0.75 * (grid.y_max - grid.y_min)
    x_span = grid.x_max - grid.x_min

    base = draw("plane_offset", -0.02, 0.02)
    _check_range("plane_offset", base, -MAX_PLANE_OFFSET, MAX_PLANE_OFFSET)
    prims: list = [Plane(base)]

    # draw ranges keep surface slopes gentle enough for the fixed-point ray
    # marching to contract over the whole ROI; explicit params may go up to the
    # hard bounds (narrow cracks legitimately oscillate and get flagged)
    if kind == "speed_bump":
        h = draw("height", 0.04, 0.08)
        _check_range("height", h, 1e-4, MAX_BUMP_HEIGHT)
        prims.append(SpeedBump(height_m=h, y0=draw("y0", y_mid_lo, y_mid_hi),
                               length=draw("length", 0.7, 1.2)))
    elif kind == "pothole":
        d = draw("depth", 0.03, 0.06)
        _check_range("depth", d, 1e-4, MAX_POTHOLE_DEPTH)
        prims.append(Pothole(depth=d, x0=draw("x0", grid.x_min + 0.25 * x_span,
                                              grid.x_max - 0.25 * x_span),
                             y0=draw("y0", y_mid_lo, y_mid_hi),
                             sigma=draw("sigma", 0.12, 0.25)))
    elif kind == "sinusoid":
        a = draw("amplitude", 0.01, 0.03)
        lam = draw("wavelength", 0.6, 1.5)
        _check_range("amplitude", a, 1e-5, MAX_SINE_AMPLITUDE)
        if lam < MIN_SINE_WAVELENGTH:
            raise DomainError(f"wavelength = {lam} below minimum {MIN_SINE_WAVELENGTH}")
        prims.append(Sinusoid(amplitude=a, wavelength=lam, y0=draw("y0", 0.0, lam)))
    elif kind == "step":
        h = p.get("height")
        if h is None:
            h = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.02, 0.06))
        _check_range("height", abs(float(h)), 1e-4, MAX_STEP_HEIGHT)
        prims.append(Step(height_m=float(h), y0=draw("y0", y_mid_lo, y_mid_hi)))
    elif kind == "crack":
        d = draw("depth", 0.02, 0.05)
        _check_range("depth", d, 1e-4, MAX_CRACK_DEPTH)
        prims.append(Crack(depth=d, width=draw("width", 0.015, 0.04),
                           x0=draw("x0", grid.x_min + 0.25 * x_span, grid.x_max - 0.25 * x_span),
                           y0=draw("y0", y_mid_lo, y_mid_hi),
                           angle=draw("angle", -0.4, 0.4)))

    hf = HeightField(primitives=tuple(prims), seed=seed)
    centers = cell_centers(grid)
    peak = np.abs(hf.height(centers[..., 0], centers[..., 1])).max()
    if peak > 0.20:
        raise DomainError(f"scene exceeds the +-20 cm elevation range (peak {peak:.3f} m)")
    tex_seed = int(rng_for(seed, f"texture/{kind}").integers(2 ** 31))
    return hf, TextureField(seed=tex_seed, octaves=texture_octaves,
                            base_cell=texture_base_cell)


def intersect_rays(hf: HeightField, cam: CameraModel, cam_to_road: RigidPose,
                   us: np.ndarray, vs: np.ndarray, n_iters: int = 8,
                   tol: float = 1e-4, max_range: float = 50.0):
    """Intersect pixel rays with the height field.

    A coarse scan over the height band that can contain road surface brackets
    the first ray-surface crossing (so back slopes occluded by a crest resolve
    to the visible ground behind them); `n_iters` bracketed Newton steps with
    bisection fallback then polish the root. On flat ground the first Newton
    step lands exactly.

    Returns road-frame hit coordinates (px, py, pz), a hit mask (descending
    rays reaching the surface within `max_range`), and the last update
    magnitude (rays with delta > tol after `n_iters` did not converge).
    """
    r = cam_to_road.rotation
    origin = cam_to_road.translation
    dxc = (np.asarray(us, dtype=np.float64) - cam.cx) / cam.fx
    dyc = (np.asarray(vs, dtype=np.float64) - cam.cy) / cam.fy
    # road-frame ray directions (unnormalized)
    dx = r[0, 0] * dxc + r[0, 1] * dyc + r[0, 2]
    dy = r[1, 0] * dxc + r[1, 1] * dyc + r[1, 2]
    dz = r[2, 0] * dxc + r[2, 1] * dyc + r[2, 2]

    descending = dz < -1e-12
    safe_dz = np.where(descending, dz, -1.0)

    # coarse scan of the height band that can contain road surface: find the
    # first sample where the ray is at or below the surface. 64 samples keep
    # the pure-bisection worst case, band / (n_coarse * 2^(n_iters-1)), below
    # tol even when every Newton proposal is rejected.
    z_band = 0.30
    n_coarse = 64
    t_top = np.maximum((z_band - origin[2]) / safe_dz, 0.0)
    t_bot = (-z_band - origin[2]) / safe_dz
    lo = t_top.copy()
    hi = t_bot.copy()
    found = np.zeros_like(descending)
    prev_t = t_top
    for k in range(1, n_coarse + 1):
        t_k = t_top + (t_bot - t_top) * (k / n_coarse)
        f_k = (origin[2] + t_k * safe_dz) - hf.height(origin[0] + t_k * dx,
                                                      origin[1] + t_k * dy)
        crossing = descending & ~found & (f_k <= 0)
        lo = np.where(crossing, prev_t, lo)
        hi = np.where(crossing, t_k, hi)
        found |= crossing
        prev_t = t_k

    # bracketed Newton refinement seeded at the first at-or-below-surface
    # sample (bisection fallback keeps the bracket valid)
    t = hi.copy()
    delta = np.zeros_like(t)
    for _ in range(n_iters):
        px = origin[0] + t * dx
        py = origin[1] + t * dy
        f = (origin[2] + t * safe_dz) - hf.height(px, py)
        lo = np.where(f > 0, t, lo)
        hi = np.where(f > 0, hi, t)
        gx, gy = hf.grad(px, py)
        fp = safe_dz - (gx * dx + gy * dy)
        fp = np.where(np.abs(fp) < 1e-9, -1e-9, fp)
        t_newton = t - f / fp
        # accept up to hi (f(hi) <= 0, so landing there is safe); t_newton == t
        # means f == 0 exactly: hold the converged root
        inside = ((t_newton > lo) & (t_newton <= hi)) | (t_newton == t)
        t_new = np.where(inside, t_newton, 0.5 * (lo + hi))
        delta = np.abs((t_new - t) * safe_dz)
        t = t_new

    px = origin[0] + t * dx
    py = origin[1] + t * dy
    z_est = origin[2] + t * safe_dz
    dist = t * np.sqrt(dx * dx + dy * dy + dz * dz)
    hit = found & (t > 0) & (dist <= max_range)
    return px, py, z_est, hit, delta


def render_view(hf: HeightField, tex, cam: CameraModel, cam_to_road: RigidPose,
                n_iters: int = 8, tol: float = 1e-4, max_range: float = 50.0,
                light=(0.9, 0.6, 1.0)) -> tuple[np.ndarray, int]:
    """Render one grayscale view by height-field ray marching.

    Shading is the texture value at the hit point times the Lambertian factor
    of the analytic surface normal under a fixed light. Returns the image in
    [0, 1] (sky pixels are 0) and the count of non-converged rays.
    """
    us, vs = np.meshgrid(np.arange(cam.width, dtype=np.float64),
                         np.arange(cam.height, dtype=np.float64))
    px, py, _pz, hit, delta = intersect_rays(
        hf, cam, cam_to_road, us, vs, n_iters=n_iters, tol=tol, max_range=max_range)
    flagged = int(np.count_nonzero(hit & (delta > tol)))

    gx, gy = hf.grad(px, py)
    inv_norm = 1.0 / np.sqrt(gx * gx + gy * gy + 1.0)
    lx, ly, lz = np.asarray(light, dtype=np.float64) / np.linalg.norm(light)
    lambert = np.clip((-gx * lx - gy * ly + lz) * inv_norm, 0.0, 1.0)
    img = np.where(hit, tex.intensity(px, py) * lambert, 0.0)
    return img, flagged


def sample_point_cloud(hf: HeightField, grid: GridSpec, density: float, seed: int,
                       noise_sigma: float = 0.0) -> FramedPoints:
    """Uniform random road-frame surface samples at `density` points/m^2."""
    if density < 0:
        raise DomainError(f"density must be non-negative, got {density}")
    area = (grid.x_max - grid.x_min) * (grid.y_max - grid.y_min)
    n = int(round(density * area))
    rng = rng_for(seed, "point_cloud")
    x = rng.uniform(grid.x_min, grid.x_max, size=n)
    y = rng.uniform(grid.y_min, grid.y_max, size=n)
    z = hf.height(x, y)
    if noise_sigma > 0:
        z = z + rng.normal(scale=noise_sigma, size=n)
    return FramedPoints(np.column_stack([x, y, z]), Frame.ROAD)


@dataclass
class SyntheticSample:
    """One rendered scene: images, exact GT map, and the scene descriptor."""

    left: np.ndarray
    right: np.ndarray | None
    gt: ElevationMap
    descriptor: dict = field(default_factory=dict)


def analytic_gt(hf: HeightField, grid: GridSpec) -> ElevationMap:
    """Exact GT elevation map: the height field evaluated at cell centers (cm)."""
    centers = cell_centers(grid)
    values = hf.height(centers[..., 0], centers[..., 1]) * 100.0
    return ElevationMap(values, np.ones(values.shape, dtype=bool))


def render_sample(hf: HeightField, tex, grid: GridSpec, cam: CameraModel,
                  cam_to_road: RigidPose, right_cam_to_road: RigidPose | None,
                  descriptor: dict | None = None, n_iters: int = 8) -> SyntheticSample:
    left, flagged = render_view(hf, tex, cam, cam_to_road, n_iters=n_iters)
    right = None
    if right_cam_to_road is not None:
        right, _ = render_view(hf, tex, cam, right_cam_to_road, n_iters=n_iters)
    desc = dict(descriptor or {})
    desc["flagged_rays"] = flagged
    return SyntheticSample(left=left, right=right, gt=analytic_gt(hf, grid), descriptor=desc)


def make_dataset(n_scenes: int, kinds, seed: int, grid: GridSpec, cam: CameraModel,
                 cam_to_road: RigidPose, right_cam_to_road: RigidPose | None = None,
                 n_iters: int = 8, texture_octaves: int = 5,
                 texture_base_cell: float = 0.16) -> list[SyntheticSample]:
    """Deterministic list of rendered scenes cycling through `kinds`."""
    kinds = list(kinds)
    if not kinds:
        raise ContractError("need at least one scene kind")
    samples = []
    for i in range(n_scenes):
        kind = kinds[i % len(kinds)]
        scene_seed = int(rng_for(seed, f"dataset/{i}").integers(2 ** 31))
        hf, tex = make_scene(kind, scene_seed, grid=grid,
                             texture_octaves=texture_octaves,
                             texture_base_cell=texture_base_cell)
        desc = {"index": i, "kind": kind, "seed": scene_seed}
        samples.append(render_sample(hf, tex, grid, cam, cam_to_road,
                                     right_cam_to_road, descriptor=desc, n_iters=n_iters))
    return samples
