"""SE(3) poses, the pinhole camera model, and pose-error metrics.

Conventions used throughout the package:

  World frame:   right-handed, +z up.  Heights are z coordinates.
  Camera frame:  right-handed, computer-vision style: +x right in the
                 image, +y down, +z forward along the optical axis.
  Pose:          world -> camera.  x_cam = R @ x_world + t.
                 The camera center in world coordinates is -R^T @ t.
  Pixels:        (x, y) with x along image columns, y along rows; the
                 sample point of pixel (ix, iy) is exactly (ix, iy).

All rotations are 3x3 orthonormal matrices with det = +1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, NonPositiveDepthError

WORLD_UP = np.array([0.0, 0.0, 1.0])

_MIN_DEPTH = 1e-9
_ORTHO_DRIFT_TOL = 1e-12


@dataclass
class Pose:
    """Rigid world->camera transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous world->camera matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def orthonormality_drift(self) -> float:
        return float(np.abs(self.rotation.T @ self.rotation - np.eye(3)).max())

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass
class Intrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass
class PoseError:
    """Camera-center distance (m) and relative rotation angle (deg)."""

    translation_error: float
    rotation_error: float


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto the closest proper rotation (SVD)."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1.0
        r = u @ vt
    return r


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying b first, then a."""
    r = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    out = Pose(r, t)
    if out.orthonormality_drift() > _ORTHO_DRIFT_TOL:
        out = Pose(orthonormalize(r), t)
    return out


def inverse(p: Pose) -> Pose:
    return Pose(p.rotation.T, -(p.rotation.T @ p.translation))


def project(k: Intrinsics, p: Pose, point_world) -> tuple[np.ndarray, float]:
    """Project one world point; returns (pixel, depth).

    The pixel may fall outside image bounds; callers filter.  Raises
    BehindCameraError when the camera-frame z is <= 1e-9.
    """
    pc = p.transform(np.asarray(point_world, dtype=np.float64))
    z = pc[2]
    if z <= _MIN_DEPTH:
        raise BehindCameraError(f"point at camera depth {z:.3g}")
    pixel = np.array([k.fx * pc[0] / z + k.cx, k.fy * pc[1] / z + k.cy])
    return pixel, float(z)


def project_many(k: Intrinsics, p: Pose, points_world: np.ndarray):
    """Vectorized projection of (N, 3) world points.

    Returns (pixels (N, 2), depths (N,), in_front (N,) bool).  Pixels of
    behind-camera points are left as NaN instead of raising.
    """
    pc = p.transform(points_world)
    z = pc[:, 2]
    in_front = z > _MIN_DEPTH
    pixels = np.full((len(pc), 2), np.nan)
    zz = np.where(in_front, z, 1.0)
    pixels[:, 0] = np.where(in_front, k.fx * pc[:, 0] / zz + k.cx, np.nan)
    pixels[:, 1] = np.where(in_front, k.fy * pc[:, 1] / zz + k.cy, np.nan)
    return pixels, z, in_front


def backproject(k: Intrinsics, p: Pose, pixel, depth: float) -> np.ndarray:
    """Lift a pixel at a camera-frame depth back to a world point."""
    if depth <= 0:
        raise NonPositiveDepthError(f"depth {depth:.3g}")
    x, y = float(pixel[0]), float(pixel[1])
    pc = np.array([(x - k.cx) / k.fx * depth, (y - k.cy) / k.fy * depth, depth])
    return p.rotation.T @ (pc - p.translation)


def backproject_many(k: Intrinsics, p: Pose, pixels: np.ndarray,
                     depths: np.ndarray) -> np.ndarray:
    """Vectorized backprojection; depths must all be positive."""
    px = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    pc = np.empty((len(d), 3))
    pc[:, 0] = (px[:, 0] - k.cx) / k.fx * d
    pc[:, 1] = (px[:, 1] - k.cy) / k.fy * d
    pc[:, 2] = d
    return (pc - p.translation) @ p.rotation


def pose_error(est: Pose, gt: Pose) -> PoseError:
    """Camera-center distance plus relative rotation angle in degrees."""
    t_err = float(np.linalg.norm(est.camera_center - gt.camera_center))
    cos_angle = (np.trace(est.rotation.T @ gt.rotation) - 1.0) / 2.0
    r_err = math.degrees(math.acos(min(1.0, max(-1.0, cos_angle))))
    return PoseError(t_err, r_err)


def axis_angle_matrix(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(a)
    if norm < 1e-15:
        return np.eye(3)
    a = a / norm
    kx = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle_rad) * kx + (1 - math.cos(angle_rad)) * (kx @ kx)


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Matrix exponential of a rotation vector."""
    return axis_angle_matrix(omega, float(np.linalg.norm(omega)))


def look_pose(center, yaw_rad: float, pitch_rad: float = 0.0) -> Pose:
    """Camera at `center` looking along world yaw/pitch.

    Yaw 0 looks along +x, measured counter-clockwise seen from above;
    pitch > 0 tilts the view upward.  The image x axis stays horizontal.
    """
    cy, sy = math.cos(yaw_rad), math.sin(yaw_rad)
    cp, sp = math.cos(pitch_rad), math.sin(pitch_rad)
    forward = np.array([cy * cp, sy * cp, sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    r_rows = np.stack([right, down, forward])  # world->camera
    t = -r_rows @ np.asarray(center, dtype=np.float64)
    return Pose(r_rows, t)


def pose_to_string(p: Pose) -> str:
    """12 whitespace-separated decimals: row-major R, then t.

    %.17g round-trips IEEE doubles exactly and is locale-independent.
    """
    vals = list(p.rotation.reshape(-1)) + list(p.translation)
    return " ".join(f"{float(v):.17g}" for v in vals)


def pose_from_string(s: str) -> Pose:
    parts = s.split()
    if len(parts) != 12:
        raise ValueError(f"expected 12 numbers, got {len(parts)}")
    vals = np.array([float(v) for v in parts])
    return Pose(vals[:9].reshape(3, 3), vals[9:])
