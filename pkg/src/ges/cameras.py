"""Pinhole camera with a rigid world-to-camera transform.

Conventions: camera looks down +z in camera space, pixel (x, y) continuous
coordinates with x to the right and y down, pixel centers at integer + 0.5.
Depth always means camera-space z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEAR_PLANE = 0.01


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (4, 4) rigid
    position: np.ndarray = field(init=False)  # world-space origin, cached

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        R = w2c[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5):
            raise ValueError("world_to_camera rotation is not orthonormal")
        object.__setattr__(self, "world_to_camera", w2c)
        object.__setattr__(self, "position", -R.T @ w2c[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera space."""
        return points @ self.rotation.T + self.translation

    def project(self, cam_points: np.ndarray) -> np.ndarray:
        """Camera-space points (..., 3) to pixel coordinates (..., 2)."""
        z = cam_points[..., 2]
        return np.stack(
            [self.fx * cam_points[..., 0] / z + self.cx,
             self.fy * cam_points[..., 1] / z + self.cy], axis=-1)

    def pixel_dirs(self, scale: int = 1, dtype=np.float64) -> np.ndarray:
        """Camera-space ray directions through every pixel center.

        Returns (H*scale, W*scale, 3) with z = 1, so a point at ray parameter
        t has camera depth exactly t.  ``scale`` > 1 yields the supersampled
        ordered grid (intrinsics scale with resolution).
        """
        h, w = self.height * scale, self.width * scale
        xs = (np.arange(w, dtype=dtype) + 0.5 - self.cx * scale) / (self.fx * scale)
        ys = (np.arange(h, dtype=dtype) + 0.5 - self.cy * scale) / (self.fy * scale)
        d = np.empty((h, w, 3), dtype=dtype)
        d[..., 0] = xs[None, :]
        d[..., 1] = ys[:, None]
        d[..., 2] = 1.0
        return d

    def scaled(self, factor: int) -> "Camera":
        """Same view at ``factor`` times the resolution."""
        return Camera(self.fx * factor, self.fy * factor,
                      self.cx * factor, self.cy * factor,
                      self.width * factor, self.height * factor,
                      self.world_to_camera)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # up parallel to view direction
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: camera axes in world frame
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ eye
    return w2c


def orbit_cameras(center, radius: float, n: int, *, height: float = 0.0,
                  fov_deg: float = 50.0, width: int = 128, height_px: int = 128,
                  phase: float = 0.0, sweep: float = 2.0 * np.pi) -> list[Camera]:
    """Cameras on a circular orbit around ``center`` looking inward."""
    center = np.asarray(center, dtype=np.float64)
    f = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
    cams = []
    for k in range(n):
        a = phase + sweep * k / max(n, 1)
        eye = center + np.array([radius * np.cos(a), radius * np.sin(a), height])
        cams.append(Camera(f, f, width / 2.0, height_px / 2.0, width, height_px,
                           look_at(eye, center)))
    return cams
