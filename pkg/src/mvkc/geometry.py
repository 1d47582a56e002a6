"""Euler poses, rotation algebra, pinhole projection and the rendering schedule.

Frames
------
Camera coordinates are x right, y down, z along the optical axis. A template
model is authored in the same frame as seen from pose ``(0, 0, 0)``: the
object's up direction is ``-y`` and its front faces the camera (``-z``).

A pose ``(azimuth, elevation, tilt)`` maps model points to camera points as::

    R = R_tilt(tilt) @ R_elev(-elevation) @ R_azim(-azimuth)

where ``R_azim`` turns about the model up axis ``(0, -1, 0)``, ``R_elev`` about
the camera's left axis ``(-1, 0, 0)`` and ``R_tilt`` about the optical axis
``(0, 0, 1)``, each right-handed. In plain axis rotations this is
``Rz(tilt) @ Rx(elevation) @ Ry(azimuth)``. Positive elevation puts the camera
above the object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

ORTHO_TOL = 1e-9


class PoseRangeError(ValueError):
    """An Euler angle lies outside its domain."""


class RotationInvariantError(ValueError):
    """A matrix is not a proper rotation."""


class DegeneratePoseError(ValueError):
    """Every keypoint ends up on or behind the camera plane."""


@dataclass(frozen=True)
class EulerPose:
    """Object viewpoint in degrees.

    Azimuth is wrapped into [0, 360), tilt into [-180, 180). Elevation is
    range-checked against [-90, 90] and never wrapped.
    """

    azimuth: float
    elevation: float
    tilt: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.azimuth, self.elevation, self.tilt)):
            raise PoseRangeError(f"non-finite pose {self!r}")
        if not -90.0 <= self.elevation <= 90.0:
            raise PoseRangeError(f"elevation {self.elevation} outside [-90, 90]")
        object.__setattr__(self, "azimuth", wrap_azimuth(self.azimuth))
        object.__setattr__(self, "tilt", wrap_tilt(self.tilt))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.azimuth, self.elevation, self.tilt)


def wrap_azimuth(angle: float) -> float:
    a = float(angle) % 360.0
    # -1e-17 % 360 == 360.0 in floating point
    return 0.0 if a >= 360.0 else a


def wrap_tilt(angle: float) -> float:
    t = (float(angle) + 180.0) % 360.0
    if t >= 360.0:
        t = 0.0
    return t - 180.0


@dataclass(frozen=True)
class Keypoint3D:
    name: str
    position: tuple[float, float, float]


@dataclass(frozen=True)
class Camera:
    """Pinhole camera looking at the model origin from ``distance`` units."""

    focal: float
    cx: float
    cy: float
    distance: float
    height: int
    width: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if not self.distance > 0:
            raise ValueError(f"distance must be positive, got {self.distance}")
        if self.height < 1 or self.width < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


class Projection(NamedTuple):
    name: str
    x: float
    y: float
    depth: float
    visible: bool


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotation(pose: EulerPose) -> np.ndarray:
    """Return the 3x3 model-to-camera rotation for ``pose``."""
    if not isinstance(pose, EulerPose):
        pose = EulerPose(*pose)
    az, el, ti = (math.radians(v) for v in pose.as_tuple())
    return _rot_z(ti) @ _rot_x(el) @ _rot_y(az)


def check_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise RotationInvariantError(f"expected a finite 3x3 matrix, got shape {r.shape}")
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        raise RotationInvariantError("matrix is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise RotationInvariantError("determinant is not +1")
    return r


def geodesic_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle in radians of the relative rotation ``r1.T @ r2``, in [0, pi]."""
    r1 = check_rotation(r1)
    r2 = check_rotation(r2)
    cos = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, cos)))


def pose_error_deg(pred: EulerPose, gt: EulerPose) -> float:
    return math.degrees(geodesic_distance(euler_to_rotation(pred), euler_to_rotation(gt)))


def viewpoint_schedule(m: int) -> list[EulerPose]:
    """Fixed render viewpoints ``(360 k / m, 10, 0)`` for ``k = 1..m``."""
    if isinstance(m, bool) or int(m) != m or m < 1:
        raise ValueError(f"number of views must be a positive integer, got {m!r}")
    m = int(m)
    return [EulerPose(360.0 * k / m, 10.0, 0.0) for k in range(1, m + 1)]


def project_points(points: np.ndarray, rotation: np.ndarray, cam: Camera):
    """Vectorised pinhole projection.

    Args:
        points: (n, 3) model coordinates.
        rotation: (3, 3) model-to-camera rotation, or a (k, 3, 3) stack.
        cam: camera intrinsics and object distance.

    Returns:
        ``(xy, depth, visible)`` with shapes (..., n, 2), (..., n), (..., n).
        Points at or behind the camera plane get NaN pixel coordinates.
    """
    points = np.asarray(points, dtype=np.float64)
    cam_pts = np.einsum("...ij,nj->...ni", rotation, points)
    depth = cam_pts[..., 2] + cam.distance
    front = depth > 0
    safe = np.where(front, depth, 1.0)
    x = cam.focal * cam_pts[..., 0] / safe + cam.cx
    y = cam.focal * cam_pts[..., 1] / safe + cam.cy
    x = np.where(front, x, np.nan)
    y = np.where(front, y, np.nan)
    with np.errstate(invalid="ignore"):
        inside = (x >= 0) & (x <= cam.width - 1) & (y >= 0) & (y <= cam.height - 1)
    return np.stack([x, y], axis=-1), depth, front & inside


def project_keypoints(
    kps: Sequence[Keypoint3D], pose: EulerPose, cam: Camera
) -> list[Projection]:
    """Project named template keypoints into the image of ``cam`` at ``pose``.

    Raises:
        DegeneratePoseError: if no keypoint lies in front of the camera.
    """
    if not kps:
        raise ValueError("keypoint set is empty")
    pts = np.array([kp.position for kp in kps], dtype=np.float64)
    xy, depth, visible = project_points(pts, euler_to_rotation(pose), cam)
    if not np.any(depth > 0):
        raise DegeneratePoseError(f"all keypoints behind the camera at pose {pose}")
    return [
        Projection(kp.name, float(xy[i, 0]), float(xy[i, 1]), float(depth[i]), bool(visible[i]))
        for i, kp in enumerate(kps)
    ]
