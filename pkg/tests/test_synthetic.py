import numpy as np
import pytest

from roadbev import geometry as geo
from roadbev import synthetic as syn
from roadbev.elevation import GridSpec, generate_gt
from roadbev.errors import DomainError


def default_rig():
    cam = geo.CameraModel(fx=1000.0, fy=1000.0, cx=480.0, cy=264.0,
                          width=960, height=528, baseline=0.12)
    cam_to_road = geo.camera_to_road(0.0, -0.31, 1.10)
    right = geo.inverse(geo.stereo_right_pose(geo.inverse(cam_to_road), cam.baseline))
    return cam, cam_to_road, right


def test_plane_is_identically_its_offset():
    grid = GridSpec()
    hf, _ = syn.make_scene("plane", seed=1, grid=grid, params={"plane_offset": 0.0})
    xs = np.linspace(grid.x_min, grid.x_max, 20)
    ys = np.linspace(grid.y_min, grid.y_max, 20)
    assert np.all(hf.height(xs, ys) == 0.0)


def test_speed_bump_peak_value():
    bump = syn.SpeedBump(height_m=0.06, y0=3.0, length=1.0)
    assert bump.height(0.0, 3.0) == pytest.approx(0.06, abs=1e-15)
    assert bump.height(0.0, 3.51) == 0.0
    # gradient vanishes at the peak and at the edges
    assert bump.grad(0.0, 3.0)[1] == pytest.approx(0.0, abs=1e-12)


def test_pothole_center_and_three_sigma():
    hole = syn.Pothole(depth=0.05, x0=0.1, y0=4.0, sigma=0.15)
    assert hole.height(0.1, 4.0) == pytest.approx(-0.05)
    assert hole.height(0.1 + 3 * 0.15, 4.0) > -0.001


def test_primitive_gradients_match_finite_differences():
    prims = [
        syn.SpeedBump(height_m=0.06, y0=3.0, length=1.0),
        syn.Pothole(depth=0.05, x0=0.1, y0=4.0, sigma=0.15),
        syn.Sinusoid(amplitude=0.03, wavelength=0.8, y0=0.2),
        syn.Crack(depth=0.04, width=0.03, x0=0.0, y0=3.5, angle=0.3),
    ]
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.8, 0.8, size=200)
    y = rng.uniform(2.2, 6.8, size=200)
    h = 1e-7
    for p in prims:
        gx, gy = p.grad(x, y)
        fdx = (p.height(x + h, y) - p.height(x - h, y)) / (2 * h)
        fdy = (p.height(x, y + h) - p.height(x, y - h)) / (2 * h)
        assert np.abs(gx - fdx).max() < 1e-6
        assert np.abs(gy - fdy).max() < 1e-6


def test_make_scene_determinism_and_validation():
    grid = GridSpec()
    a_hf, a_tex = syn.make_scene("pothole", seed=42, grid=grid)
    b_hf, b_tex = syn.make_scene("pothole", seed=42, grid=grid)
    assert a_hf == b_hf
    assert a_tex == b_tex
    c_hf, _ = syn.make_scene("pothole", seed=43, grid=grid)
    assert c_hf != a_hf
    with pytest.raises(DomainError):
        syn.make_scene("speed_bump", seed=0, grid=grid, params={"height": 0.5})
    with pytest.raises(DomainError):
        syn.make_scene("sinusoid", seed=0, grid=grid, params={"wavelength": 0.05})
    with pytest.raises(DomainError):
        syn.make_scene("volcano", seed=0, grid=grid)


@pytest.mark.parametrize("kind", syn.SCENE_KINDS)
def test_scenes_respect_elevation_range(kind):
    grid = GridSpec()
    for seed in range(5):
        hf, _ = syn.make_scene(kind, seed=seed, grid=grid)
        gt = syn.analytic_gt(hf, grid)
        assert np.abs(gt.values).max() <= 20.0
        assert gt.mask.all()


def test_texture_range_and_determinism():
    tex = syn.TextureField(seed=7)
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=1000)
    y = rng.uniform(2, 7, size=1000)
    v = tex.intensity(x, y)
    assert v.min() >= 0.0 and v.max() <= 1.0
    assert np.array_equal(v, syn.TextureField(seed=7).intensity(x, y))
    assert not np.array_equal(v, syn.TextureField(seed=8).intensity(x, y))
    assert v.std() > 0.05  # actually textured


def test_render_determinism_bit_identical():
    cam, cam_to_road, _ = default_rig()
    grid = GridSpec()
    hf, tex = syn.make_scene("speed_bump", seed=3, grid=grid)
    img1, f1 = syn.render_view(hf, tex, cam, cam_to_road)
    img2, f2 = syn.render_view(hf, tex, cam, cam_to_road)
    assert np.array_equal(img1, img2)
    assert f1 == f2


def test_flat_plane_constant_texture_renders_constant_road_region():
    cam, cam_to_road, _ = default_rig()
    hf = syn.HeightField(primitives=(syn.Plane(0.0),))
    img, flagged = syn.render_view(hf, syn.ConstantTexture(0.5), cam, cam_to_road)
    assert flagged == 0
    road = img[img > 0]
    assert len(road) > 1000
    assert np.ptp(road) < 1e-12
    # with a short range cap, rays that fall beyond it render as sky (exactly 0)
    capped, _ = syn.render_view(hf, syn.ConstantTexture(0.5), cam, cam_to_road, max_range=10.0)
    assert np.all(capped[0] == 0.0)
    assert capped[capped.shape[0] - 1].min() > 0.0


def test_plane_hit_points_reproject_to_their_pixels():
    cam, cam_to_road, _ = default_rig()
    hf = syn.HeightField(primitives=(syn.Plane(0.0),))
    rng = np.random.default_rng(2)
    us = rng.uniform(100, 860, size=50)
    vs = rng.uniform(330, 520, size=50)  # below the horizon
    px, py, pz, hit, _ = syn.intersect_rays(hf, cam, cam_to_road, us, vs)
    assert hit.all()
    pts = geo.FramedPoints(np.column_stack([px, py, pz]), geo.Frame.ROAD)
    uv, _, valid = geo.project_points(
        geo.transform_points(pts, geo.inverse(cam_to_road)), cam)
    assert valid.all()
    assert np.abs(uv[:, 0] - us).max() < 1e-6
    assert np.abs(uv[:, 1] - vs).max() < 1e-6


def test_marched_hits_match_closed_form_for_offset_plane_and_step():
    cam, cam_to_road, _ = default_rig()
    c = 0.04
    hf = syn.HeightField(primitives=(syn.Plane(c),))
    us = np.array([300.0, 480.0, 700.0])
    vs = np.array([400.0, 450.0, 500.0])
    px, py, pz, hit, delta = syn.intersect_rays(hf, cam, cam_to_road, us, vs)
    assert hit.all() and np.all(delta < 1e-12)
    origin = cam_to_road.translation
    r = cam_to_road.rotation
    d_cam = np.column_stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones(3)])
    d_road = d_cam @ r.T
    t = (c - origin[2]) / d_road[:, 2]
    assert np.abs(px - (origin[0] + t * d_road[:, 0])).max() < 1e-6
    assert np.abs(py - (origin[1] + t * d_road[:, 1])).max() < 1e-6
    assert np.abs(pz - c).max() < 1e-9

    step = syn.HeightField(primitives=(syn.Step(height_m=0.05, y0=4.0),))
    px, py, pz, hit, delta = syn.intersect_rays(step, cam, cam_to_road, us, vs)
    # these rays land well away from the jump and settle to the flat parts
    assert np.all(np.abs(py - 4.0) > 0.2) and np.all(delta < 1e-12)


def test_smooth_scene_rays_all_converge():
    cam, cam_to_road, _ = default_rig()
    grid = GridSpec()
    for kind in ("plane", "speed_bump", "sinusoid"):
        hf, tex = syn.make_scene(kind, seed=11, grid=grid)
        gx, gy = hf.grad(*np.meshgrid(np.linspace(-1, 1, 80), np.linspace(2, 7.2, 160)))
        assert np.hypot(gx, gy).max() < 0.3
        _img, flagged = syn.render_view(hf, tex, cam, cam_to_road)
        assert flagged == 0


def test_stereo_rows_align_for_rectified_rig():
    cam, cam_to_road, right_c2r = default_rig()
    road_to_left = geo.inverse(cam_to_road)
    road_to_right = geo.inverse(right_c2r)
    rng = np.random.default_rng(3)
    pts = geo.FramedPoints(np.column_stack([
        rng.uniform(-0.8, 0.8, 40), rng.uniform(2.3, 6.5, 40), rng.uniform(-0.15, 0.15, 40)]),
        geo.Frame.ROAD)
    uv_l, _, val_l = geo.project_points(geo.transform_points(pts, road_to_left), cam)
    uv_r, _, val_r = geo.project_points(geo.transform_points(pts, road_to_right), cam)
    both = val_l & val_r
    assert both.sum() > 20
    assert np.abs(uv_l[both, 1] - uv_r[both, 1]).max() < 1e-6


def _ncc(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum()) + 1e-12
    return float((a * b).sum() / denom)


def test_textured_plane_disparity_matches_closed_form():
    cam, cam_to_road, right_c2r = default_rig()
    hf = syn.HeightField(primitives=(syn.Plane(0.0),))
    tex = syn.TextureField(seed=5)
    left, _ = syn.render_view(hf, tex, cam, cam_to_road)
    right, _ = syn.render_view(hf, tex, cam, right_c2r)
    road_to_left = geo.inverse(cam_to_road)
    half = 7
    checked = 0
    for (u0, v0) in [(300, 420), (480, 380), (650, 460), (420, 500)]:
        # landmark = road point under this left pixel; closed-form disparity
        px, py, pz, hit, _ = syn.intersect_rays(
            hf, cam, cam_to_road, np.array([float(u0)]), np.array([float(v0)]))
        assert hit[0]
        pt = geo.FramedPoints(np.array([[px[0], py[0], pz[0]]]), geo.Frame.ROAD)
        depth = geo.transform_points(pt, road_to_left).xyz[0, 2]
        expected = cam.fx * cam.baseline / depth
        patch = left[v0 - half:v0 + half + 1, u0 - half:u0 + half + 1]
        center = int(round(u0 - expected))
        span = 6
        scores = []
        offsets = range(center - span, center + span + 1)
        for ur in offsets:
            cand = right[v0 - half:v0 + half + 1, ur - half:ur + half + 1]
            scores.append(_ncc(patch, cand))
        scores = np.array(scores)
        k = int(scores.argmax())
        assert 0 < k < len(scores) - 1, "NCC peak ran into the search border"
        # parabolic sub-pixel refinement
        denom = scores[k - 1] - 2 * scores[k] + scores[k + 1]
        frac = 0.5 * (scores[k - 1] - scores[k + 1]) / denom if denom != 0 else 0.0
        u_best = list(offsets)[k] + frac
        found = u0 - u_best
        assert abs(found - expected) <= 0.5, f"disparity {found} vs {expected}"
        checked += 1
    assert checked == 4


def test_sample_point_cloud_plane_recovery_and_noise():
    grid = GridSpec(nx=16, ny=16)
    hf = syn.HeightField(primitives=(syn.Plane(0.01),))
    # ~1 point per cell, no noise: every populated cell is exactly 1.0 cm
    density = 1.0 / grid.resolution ** 2
    pts = syn.sample_point_cloud(hf, grid, density, seed=0)
    emap = generate_gt(pts, grid)
    assert emap.mask.sum() > 100
    assert np.all(emap.values[emap.mask] == 1.0)

    # sigma_z = 2 mm at ~50 points/cell: per-cell error std ~ 0.2/sqrt(50) cm
    pts = syn.sample_point_cloud(hf, grid, 50 * density, seed=1, noise_sigma=0.002)
    emap = generate_gt(pts, grid)
    errs = emap.values[emap.mask] - 1.0
    expected_std = 0.2 / np.sqrt(50)
    assert expected_std * 0.7 < errs.std() < expected_std * 1.4

    empty = syn.sample_point_cloud(hf, grid, 0.0, seed=2)
    assert len(empty) == 0
    assert not generate_gt(empty, grid).mask.any()


def test_make_dataset_deterministic_and_exact_gt():
    grid = GridSpec(nx=16, ny=24)
    cam = geo.CameraModel(fx=120.0, fy=120.0, cx=64.0, cy=48.0, width=128, height=96,
                          baseline=0.3)
    cam_to_road = geo.camera_to_road(0.0, -0.35, 1.10)
    right = geo.inverse(geo.stereo_right_pose(geo.inverse(cam_to_road), cam.baseline))
    ds1 = syn.make_dataset(4, ["speed_bump", "pothole"], seed=9, grid=grid, cam=cam,
                           cam_to_road=cam_to_road, right_cam_to_road=right)
    ds2 = syn.make_dataset(4, ["speed_bump", "pothole"], seed=9, grid=grid, cam=cam,
                           cam_to_road=cam_to_road, right_cam_to_road=right)
    assert len(ds1) == 4
    for s1, s2 in zip(ds1, ds2):
        assert s1.left.tobytes() == s2.left.tobytes()
        assert s1.right.tobytes() == s2.right.tobytes()
        assert np.array_equal(s1.gt.values, s2.gt.values)
        assert s1.gt.mask.all()
        assert s1.descriptor["kind"] in ("speed_bump", "pothole")
    # GT really is the analytic field at cell centers
    hf, _tex = syn.make_scene(ds1[1].descriptor["kind"], ds1[1].descriptor["seed"], grid=grid)
    assert np.array_equal(syn.analytic_gt(hf, grid).values, ds1[1].gt.values)
