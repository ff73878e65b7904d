"""Pinhole camera model.

Convention: right-handed, world-to-camera rigid transform, camera looks
down +z.  Pixel (ix, iy) samples the image plane at exactly (ix, iy) in
pixel coordinates (no half-pixel offset).
"""

from dataclasses import dataclass, field

import numpy as np


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray        # (3,3) world -> camera
    translation: np.ndarray     # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if R.shape != (3, 3) or t.shape != (3,):
            raise CameraError("camera pose shapes must be (3,3) and (3,)")
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise CameraError("non-finite camera pose")
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise CameraError("need 0 < near < far")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise CameraError("rotation must be orthonormal with det 1")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


def look_at(eye, target, up=(0.0, 1.0, 0.0), **intrinsics) -> Camera:
    """Build a camera at `eye` looking at `target` (+z toward the target)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n == 0:
        raise CameraError("eye and target coincide")
    z = fwd / n
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-12:
        # up parallel to view direction; pick any perpendicular axis
        up = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])          # rows: camera axes in world frame
    return Camera(rotation=R, translation=-R @ eye, **intrinsics)
