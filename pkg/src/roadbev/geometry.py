"""Rigid transforms between camera, leveled-camera and road frames, and pinhole projection.

Coordinate conventions
----------------------
Camera frame: X right, Y down, Z forward along the optical axis.

Camera-reference frame: same origin as the camera, axes leveled so that X and Z
span the horizontal plane and Y points straight down.

Road frame: origin vertically below the camera-reference origin by the camera
height; X right (lateral), Y forward (longitudinal), Z up. Elevation is the
road-frame Z coordinate, positive above the reference plane.

Angles are right-handed rotations about camera axes: pitch about +X (positive
tilts the optical axis upward), roll about +Z. A forward road camera looking
down at the ground therefore carries a *negative* pitch.

Transforms are kept in float64 throughout, and the point transform / projection
formulas are written as explicit elementwise expressions (no matmul) so that a
scalar reference loop using the same expressions reproduces them bit-exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError, FrameMismatchError

# Points closer than this along the optical axis never project validly (meters).
Z_MIN = 0.1

_ORTHONORMALITY_TOL = 1e-9


class Frame(enum.Enum):
    """Coordinate frame a point batch lives in."""

    CAMERA = "camera"
    CAMERA_REFERENCE = "camera_reference"
    ROAD = "road"


@dataclass(frozen=True)
class FramedPoints:
    """An (N, 3) batch of points in meters, tagged with its frame."""

    xyz: np.ndarray
    frame: Frame

    def __post_init__(self) -> None:
        xyz = np.asarray(self.xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ContractError(f"points must have shape (N, 3), got {xyz.shape}")
        object.__setattr__(self, "xyz", xyz)

    def __len__(self) -> int:
        return self.xyz.shape[0]


@dataclass(frozen=True)
class RigidPose:
    """SE(3) transform p_dst = R @ p_src + t.

    `src` and `dst` are optional frame tags; when set, `transform_points`
    refuses point batches tagged with a different source frame.
    """

    rotation: np.ndarray
    translation: np.ndarray
    src: Frame | None = None
    dst: Frame | None = None

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ContractError(f"rotation must be 3x3, got {rot.shape}")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err >= _ORTHONORMALITY_TOL:
            raise DomainError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3e})")
        det = float(np.linalg.det(rot))
        if abs(det - 1.0) >= _ORTHONORMALITY_TOL:
            raise DomainError(f"rotation must be proper (det = {det!r})")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)


def identity_pose(src: Frame | None = None, dst: Frame | None = None) -> RigidPose:
    return RigidPose(np.eye(3), np.zeros(3), src=src, dst=dst)


def _rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_roll_pitch(roll: float, pitch: float) -> RigidPose:
    """Camera -> camera-reference pose for a camera mounted at (roll, pitch).

    Attitude is composed pitch-first: a point with camera coordinates p has
    reference coordinates Rz(roll) @ Rx(pitch) @ p. Translation is zero.
    """
    if not (abs(roll) < math.pi / 2 and abs(pitch) < math.pi / 2):
        raise DomainError(f"roll/pitch must lie in (-pi/2, pi/2), got ({roll}, {pitch})")
    rot = _rot_z(roll) @ _rot_x(pitch)
    return RigidPose(rot, np.zeros(3), src=Frame.CAMERA, dst=Frame.CAMERA_REFERENCE)


def reference_to_road(camera_height: float = 1.10) -> RigidPose:
    """Camera-reference -> road pose for a camera `camera_height` meters above the road plane."""
    if camera_height <= 0:
        raise DomainError(f"camera height must be positive, got {camera_height}")
    rot = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
    return RigidPose(rot, np.array([0.0, 0.0, camera_height]),
                     src=Frame.CAMERA_REFERENCE, dst=Frame.ROAD)


def camera_to_road(roll: float, pitch: float, camera_height: float = 1.10) -> RigidPose:
    """Full camera -> road pose (roll/pitch leveling then drop to the road plane)."""
    return compose(reference_to_road(camera_height), rotation_from_roll_pitch(roll, pitch))


def compose(outer: RigidPose, inner: RigidPose) -> RigidPose:
    """Pose applying `inner` first, then `outer`."""
    if inner.dst is not None and outer.src is not None and inner.dst != outer.src:
        raise FrameMismatchError(
            f"cannot compose: inner maps to {inner.dst}, outer expects {outer.src}")
    rot = outer.rotation @ inner.rotation
    t = outer.rotation @ inner.translation + outer.translation
    return RigidPose(rot, t, src=inner.src, dst=outer.dst)


def inverse(pose: RigidPose) -> RigidPose:
    rot = pose.rotation.T.copy()
    return RigidPose(rot, -(rot @ pose.translation), src=pose.dst, dst=pose.src)


def stereo_right_pose(road_to_left: RigidPose, baseline: float) -> RigidPose:
    """Road -> right-camera pose of a rectified rig, right camera `baseline` m along camera +X."""
    if baseline < 0:
        raise DomainError(f"baseline must be non-negative, got {baseline}")
    t = road_to_left.translation - np.array([baseline, 0.0, 0.0])
    return RigidPose(road_to_left.rotation, t, src=road_to_left.src, dst=road_to_left.dst)


def transform_points(points: FramedPoints, pose: RigidPose) -> FramedPoints:
    """Apply `pose` to a point batch: out = R @ p + t per point.

    Written elementwise so a scalar loop with the same expression order is
    bit-identical.
    """
    if pose.src is not None and points.frame != pose.src:
        raise FrameMismatchError(
            f"points tagged {points.frame} but pose transforms from {pose.src}")
    p = points.xyz
    r = pose.rotation
    t = pose.translation
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    out = np.empty_like(p)
    out[:, 0] = r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0]
    out[:, 1] = r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1]
    out[:, 2] = r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2]
    return FramedPoints(out, pose.dst if pose.dst is not None else points.frame)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus image size; baseline is 0 for a mono rig."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    baseline: float = 0.0

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width):
            raise DomainError(f"cx = {self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            raise DomainError(f"cy = {self.cy} outside [0, {self.height})")
        if self.baseline < 0:
            raise DomainError(f"baseline must be non-negative, got {self.baseline}")


def project_points(
    points: FramedPoints, cam: CameraModel, z_min: float = Z_MIN
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project camera-frame points to pixels.

    Returns (uv, depth, valid): uv is (N, 2) continuous pixel coordinates,
    depth the camera-frame Z, and valid flags points with depth > z_min that
    land inside the image. Invalid points are flagged, never dropped.
    """
    if points.frame != Frame.CAMERA:
        raise FrameMismatchError(f"projection needs camera-frame points, got {points.frame}")
    p = points.xyz
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    uv = np.empty((p.shape[0], 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        uv[:, 0] = cam.fx * x / z + cam.cx
        uv[:, 1] = cam.fy * y / z + cam.cy
    u, v = uv[:, 0], uv[:, 1]
    valid = (z > z_min) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return uv, z.copy(), valid
