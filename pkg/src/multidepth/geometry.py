"""Pinhole camera math: un-projection, re-projection, spherical error coordinates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import CameraIntrinsics, DepthMap, ImageTensor


@dataclass
class PointCloud:
    """3D points in meters with optional per-point RGB bytes."""

    points: np.ndarray            # (N, 3) float64
    colors: Optional[np.ndarray] = None  # (N, 3) uint8 or None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("color count does not match point count")

    def __len__(self) -> int:
        return len(self.points)


def _pixel_rays(height: int, width: int, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized ray directions ((x-cx)/fx, (y-cy)/fy) on the pixel grid."""
    xs = (np.arange(width, dtype=np.float64) - k.cx) / k.fx
    ys = (np.arange(height, dtype=np.float64) - k.cy) / k.fy
    return np.meshgrid(xs, ys)


def unproject(d: DepthMap, k: CameraIntrinsics, scale: float = 1.0,
              rgb: Optional[ImageTensor] = None) -> PointCloud:
    """Lift valid depth pixels to 3D: (s*d*(x-cx)/fx, s*d*(y-cy)/fy, s*d).

    Points are emitted in row-major pixel order over valid pixels; colors are
    copied from `rgb` when given.
    """
    if scale <= 0:
        raise ValueError("scale must be > 0")
    u, v = _pixel_rays(d.height, d.width, k)
    z = d.depth.astype(np.float64) * scale
    pts = np.stack([u * z, v * z, z], axis=-1)[d.valid]
    colors = None
    if rgb is not None:
        if (rgb.height, rgb.width) != (d.height, d.width):
            raise ValueError("rgb dims do not match depth dims")
        flat = np.clip(np.round(rgb.data * 255.0), 0, 255).astype(np.uint8)
        if flat.shape[0] == 1:
            flat = np.repeat(flat, 3, axis=0)
        colors = flat.transpose(1, 2, 0)[d.valid]
    return PointCloud(pts, colors)


def project(pc: PointCloud, k: CameraIntrinsics) -> np.ndarray:
    """Project points to (pixel x, pixel y, depth); rows with z <= 0 become NaN."""
    pts = pc.points
    out = np.full_like(pts, np.nan)
    ok = pts[:, 2] > 0
    z = pts[ok, 2]
    out[ok, 0] = k.fx * pts[ok, 0] / z + k.cx
    out[ok, 1] = k.fy * pts[ok, 1] / z + k.cy
    out[ok, 2] = z
    return out


def to_spherical(d: DepthMap, k: CameraIntrinsics, z_mode: str = "log") -> np.ndarray:
    """Per-pixel (theta, phi, z) coordinates of a depth map, (3, H, W) float64.

    theta/phi are the azimuth/elevation of the normalized pixel ray
    (depth-independent); z is ln(depth) by default or raw depth with
    z_mode="linear". Entries at invalid pixels are 0.
    """
    if z_mode not in ("log", "linear"):
        raise ValueError(f"unknown z_mode {z_mode!r}")
    u, v = _pixel_rays(d.height, d.width, k)
    norm = np.sqrt(u * u + v * v + 1.0)
    theta = np.arctan2(u, 1.0)
    phi = np.arcsin(v / norm)
    out = np.zeros((3, d.height, d.width), dtype=np.float64)
    out[0][d.valid] = theta[d.valid]
    out[1][d.valid] = phi[d.valid]
    dep = d.depth[d.valid].astype(np.float64)
    out[2][d.valid] = np.log(dep) if z_mode == "log" else dep
    return out
