import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadbev import geometry as geo
from roadbev.errors import DomainError, FrameMismatchError


def random_pose(rng, src=None, dst=None):
    roll, pitch = rng.uniform(-1.4, 1.4, size=2)
    base = geo.rotation_from_roll_pitch(roll, pitch)
    t = rng.uniform(-5, 5, size=3)
    return geo.RigidPose(base.rotation, t, src=src, dst=dst)


def test_identity_from_zero_angles():
    pose = geo.rotation_from_roll_pitch(0.0, 0.0)
    assert np.array_equal(pose.rotation, np.eye(3))
    assert np.array_equal(pose.translation, np.zeros(3))


def test_pitch_tilts_forward_axis_by_exactly_pitch():
    p = 0.31
    pose = geo.rotation_from_roll_pitch(0.0, p)
    fwd = pose.rotation @ np.array([0.0, 0.0, 1.0])
    assert math.isclose(fwd @ np.array([0.0, 0.0, 1.0]), math.cos(p), abs_tol=1e-12)
    # rotation is about the lateral axis: X component untouched
    assert fwd[0] == 0.0


def test_angle_out_of_range_rejected():
    with pytest.raises(DomainError):
        geo.rotation_from_roll_pitch(0.0, math.pi / 2)
    with pytest.raises(DomainError):
        geo.rotation_from_roll_pitch(-2.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(roll=st.floats(-1.5, 1.5), pitch=st.floats(-1.5, 1.5))
def test_random_roll_pitch_orthonormal_and_invertible(roll, pitch):
    pose = geo.rotation_from_roll_pitch(roll, pitch)
    r = pose.rotation
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12
    back = geo.compose(geo.inverse(pose), pose)
    assert np.abs(back.rotation - np.eye(3)).max() < 1e-12
    assert np.abs(back.translation).max() < 1e-12


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(1)
    pose = random_pose(rng)
    ident = geo.identity_pose()
    composed = geo.compose(pose, ident)
    assert np.allclose(composed.rotation, pose.rotation, atol=1e-15)
    assert np.allclose(composed.translation, pose.translation, atol=1e-15)
    round_trip = geo.compose(pose, geo.inverse(pose))
    assert np.abs(round_trip.rotation - np.eye(3)).max() < 1e-12
    assert np.abs(round_trip.translation).max() < 1e-12


def test_compose_associative_and_matches_sequential_transform():
    rng = np.random.default_rng(2)
    a, b, c = (random_pose(rng) for _ in range(3))
    ab_c = geo.compose(geo.compose(a, b), c)
    a_bc = geo.compose(a, geo.compose(b, c))
    assert np.abs(ab_c.rotation - a_bc.rotation).max() < 1e-12
    assert np.abs(ab_c.translation - a_bc.translation).max() < 1e-12

    pts = geo.FramedPoints(rng.uniform(-3, 3, size=(40, 3)), geo.Frame.CAMERA)
    via_compose = geo.transform_points(pts, geo.compose(a, b))
    sequential = geo.transform_points(geo.transform_points(pts, b), a)
    assert np.abs(via_compose.xyz - sequential.xyz).max() < 1e-12


def test_pure_translation_matches_camera_height_case():
    pose = geo.RigidPose(np.eye(3), np.array([0.0, 0.0, -1.10]))
    out = geo.transform_points(geo.FramedPoints(np.zeros((1, 3)), geo.Frame.CAMERA), pose)
    assert np.array_equal(out.xyz, np.array([[0.0, 0.0, -1.10]]))


def test_transform_round_trip():
    rng = np.random.default_rng(3)
    pose = random_pose(rng, src=geo.Frame.CAMERA, dst=geo.Frame.ROAD)
    pts = geo.FramedPoints(rng.uniform(-10, 10, size=(200, 3)), geo.Frame.CAMERA)
    back = geo.transform_points(geo.transform_points(pts, pose), geo.inverse(pose))
    assert np.abs(back.xyz - pts.xyz).max() < 1e-9
    assert back.frame == geo.Frame.CAMERA


def test_frame_tag_enforced():
    pose = geo.rotation_from_roll_pitch(0.1, 0.2)
    pts = geo.FramedPoints(np.zeros((1, 3)), geo.Frame.ROAD)
    with pytest.raises(FrameMismatchError):
        geo.transform_points(pts, pose)
    with pytest.raises(FrameMismatchError):
        geo.compose(geo.reference_to_road(), geo.reference_to_road())


def test_reference_to_road_geometry():
    pose = geo.reference_to_road(1.10)
    # point on the road plane straight below the camera
    below = geo.FramedPoints(np.array([[0.0, 1.10, 0.0]]), geo.Frame.CAMERA_REFERENCE)
    out = geo.transform_points(below, pose)
    assert np.abs(out.xyz).max() < 1e-15
    # a point ahead of the camera maps to positive longitudinal coordinate
    ahead = geo.FramedPoints(np.array([[0.0, 0.0, 5.0]]), geo.Frame.CAMERA_REFERENCE)
    out = geo.transform_points(ahead, pose)
    assert np.allclose(out.xyz, [[0.0, 5.0, 1.10]])


def test_projection_principal_point_and_pinhole_arithmetic():
    cam = geo.CameraModel(fx=1000.0, fy=1000.0, cx=480.0, cy=270.0, width=960, height=540)
    pts = geo.FramedPoints(
        np.array([[0.0, 0.0, 5.0], [0.1, 0.0, 5.0], [0.0, 0.0, -1.0]]), geo.Frame.CAMERA)
    uv, depth, valid = geo.project_points(pts, cam)
    assert np.array_equal(uv[0], [480.0, 270.0])
    assert uv[1, 0] == 500.0
    assert depth[1] == 5.0
    assert valid.tolist() == [True, True, False]


def test_projection_scale_invariance_along_ray():
    rng = np.random.default_rng(4)
    cam = geo.CameraModel(fx=850.0, fy=900.0, cx=400.0, cy=300.0, width=800, height=600)
    base = rng.uniform(-0.5, 0.5, size=(100, 3))
    base[:, 2] = rng.uniform(1.0, 10.0, size=100)
    lam = rng.uniform(0.5, 3.0, size=(100, 1))
    uv0, _, _ = geo.project_points(geo.FramedPoints(base, geo.Frame.CAMERA), cam)
    uv1, _, _ = geo.project_points(geo.FramedPoints(base * lam, geo.Frame.CAMERA), cam)
    assert np.abs(uv0 - uv1).max() < 1e-9


def test_projection_requires_camera_frame():
    cam = geo.CameraModel(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)
    with pytest.raises(FrameMismatchError):
        geo.project_points(geo.FramedPoints(np.ones((1, 3)), geo.Frame.ROAD), cam)


def test_camera_model_validation():
    with pytest.raises(DomainError):
        geo.CameraModel(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=10, height=10)
    with pytest.raises(DomainError):
        geo.CameraModel(fx=1.0, fy=1.0, cx=20.0, cy=0.0, width=10, height=10)
    with pytest.raises(DomainError):
        geo.CameraModel(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=10, height=10, baseline=-0.1)


def test_bad_rotation_rejected():
    with pytest.raises(DomainError):
        geo.RigidPose(np.eye(3) * 2.0, np.zeros(3))
    reflect = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(DomainError):
        geo.RigidPose(reflect, np.zeros(3))


def test_stereo_right_pose_shifts_along_camera_x():
    road_to_cam = geo.inverse(geo.camera_to_road(0.0, -0.3, 1.10))
    right = geo.stereo_right_pose(road_to_cam, 0.12)
    pt = geo.FramedPoints(np.array([[0.0, 4.0, 0.0]]), geo.Frame.ROAD)
    left_xyz = geo.transform_points(pt, road_to_cam).xyz
    right_xyz = geo.transform_points(pt, right).xyz
    assert np.allclose(left_xyz - right_xyz, [[0.12, 0.0, 0.0]])
