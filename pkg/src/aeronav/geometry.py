"""Camera projection, frame transforms, and angle utilities.

Coordinate conventions used throughout the package:

Camera frame (standard pinhole):
  - x right, y down, z forward along the optical axis.

Body frame (ENU-style):
  - x forward, y left, z up.
  - Fixed camera mounting: camera z -> body x, camera x -> body -y,
    camera y -> body -z (i.e. body_forward = cam_z, body_left = -cam_x,
    body_up = -cam_y).

Odometry frame:
  - World-fixed frame anchored at the start pose. A body pose is a
    position plus yaw (about world z) and pitch (about body y, positive
    tilts the forward axis downward). Roll is always zero; pitch is kept
    in the interface but the simulator flies planar (pitch = 0).

Pixel rounding is half-away-from-zero so projections are deterministic
across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

# Columns are the body-frame directions of the camera x/y/z axes.
CAM_TO_BODY = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]. Raises ValueError on non-finite input."""
    if not math.isfinite(a):
        raise ValueError(f"cannot wrap non-finite angle {a!r}")
    return math.pi - (math.pi - a) % (2.0 * math.pi)


def round_half_away(v: float) -> int:
    """Round half away from zero (2.5 -> 3, -2.5 -> -3)."""
    if v >= 0.0:
        return int(math.floor(v + 0.5))
    return int(math.ceil(v - 0.5))


@dataclass(frozen=True)
class Pixel:
    """Integer image coordinate, x = column, y = row."""

    x: int
    y: int

    def in_bounds(self, width: int, height: int) -> bool:
        return 0 <= self.x < width and 0 <= self.y < height


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; fov_x must agree with f_x and width."""

    f_x: float
    f_y: float
    c_x: float
    c_y: float
    width: int
    height: int
    fov_x: float

    def __post_init__(self) -> None:
        if self.f_x <= 0 or self.f_y <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.c_x < self.width and 0 <= self.c_y < self.height):
            raise ValueError("principal point must lie inside the image")
        expected = 2.0 * math.atan(self.width / (2.0 * self.f_x))
        if abs(expected - self.fov_x) > 1e-6:
            raise ValueError(
                f"fov_x {self.fov_x:.8f} inconsistent with f_x/width "
                f"(expected {expected:.8f})"
            )

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x: float) -> "CameraIntrinsics":
        """Square-pixel intrinsics with the principal point at the image center."""
        f = width / (2.0 * math.tan(fov_x / 2.0))
        return cls(f, f, width / 2.0, height / 2.0, width, height, fov_x)

    @property
    def half_fov_x(self) -> float:
        return self.fov_x / 2.0


@dataclass(frozen=True, eq=False)
class Pose:
    """Body pose in the odometry frame: position (m), yaw and pitch (rad)."""

    position: np.ndarray
    yaw: float
    pitch: float = 0.0

    def __post_init__(self) -> None:
        pos = np.asarray(self.position, dtype=float)
        if pos.shape != (3,):
            raise ValueError("position must be a 3-vector")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @cached_property
    def rotation(self) -> np.ndarray:
        """Body-to-odometry rotation, Rz(yaw) @ Ry(pitch)."""
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
        return rz @ ry

    def forward(self) -> np.ndarray:
        """Unit body-x (camera optical axis) expressed in the odometry frame."""
        return self.rotation @ np.array([1.0, 0.0, 0.0])


def pixel_to_camera(p: Pixel, depth: float, k: CameraIntrinsics) -> np.ndarray:
    """Back-project a pixel at the given z-depth into the camera frame.

    Returns depth * K^-1 * [x, y, 1]^T; the z component equals depth exactly.
    """
    if depth <= 0.0:
        raise ValueError(f"depth must be positive, got {depth}")
    if not p.in_bounds(k.width, k.height):
        raise ValueError(f"pixel {p} outside {k.width}x{k.height} image")
    return np.array([
        depth * (p.x - k.c_x) / k.f_x,
        depth * (p.y - k.c_y) / k.f_y,
        depth,
    ])


def camera_to_odom(x_cam: np.ndarray, pose: Pose) -> np.ndarray:
    """Transform a camera-frame point to the odometry frame at the given pose."""
    return pose.rotation @ (CAM_TO_BODY @ np.asarray(x_cam, dtype=float)) + pose.position


def odom_to_camera(x_odom: np.ndarray, pose: Pose) -> np.ndarray:
    """Inverse of camera_to_odom."""
    body = pose.rotation.T @ (np.asarray(x_odom, dtype=float) - pose.position)
    return CAM_TO_BODY.T @ body


def project_to_pixel(x_odom: np.ndarray, pose: Pose, k: CameraIntrinsics) -> Pixel | None:
    """Project an odometry-frame point to a pixel.

    Returns None when the point is behind the camera or falls outside the
    frame after rounding; this is an expected outcome, not an error.
    """
    cam = odom_to_camera(x_odom, pose)
    if cam[2] <= 1e-9:
        return None
    px = round_half_away(k.f_x * cam[0] / cam[2] + k.c_x)
    py = round_half_away(k.f_y * cam[1] / cam[2] + k.c_y)
    pixel = Pixel(px, py)
    if not pixel.in_bounds(k.width, k.height):
        return None
    return pixel


def bearing(p: Pixel, k: CameraIntrinsics) -> float:
    """Horizontal angle of the pixel's ray relative to the optical axis.

    Positive for pixels right of the principal point; magnitude stays within
    half the horizontal field of view for in-frame pixels.
    """
    return math.atan((p.x - k.c_x) / k.f_x)


def bearing_to_column(theta: float, k: CameraIntrinsics) -> int:
    """Image column whose ray bearing is closest to theta (clamped to frame)."""
    col = round_half_away(k.c_x + k.f_x * math.tan(theta))
    return min(max(col, 0), k.width - 1)
