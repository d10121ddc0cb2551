"""Procedural indoor scenes: ray-cast room + boxes with ground-truth RGB,
depth, intrinsics, and instance masks, plus a degradation model standing in
for an upstream depth estimator's error."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import CameraIntrinsics, DepthMap, ImageTensor, Rng, gaussian_blur_2d
from . import formats
from .formats import MaskSet

logger = logging.getLogger(__name__)

# Face ids follow 2*axis + (0 for +bound, 1 for -bound); image y points down.
_FACE_NAMES = ("wall_right", "wall_left", "wall_floor", "wall_ceiling", "wall_front", "wall_back")


@dataclass
class SceneSpec:
    """An axis-aligned room centered on the camera, with random boxes.

    The camera sits at cam_pos (inside the room) looking along +z after a yaw
    about the vertical axis; straight ahead it faces the +z wall at
    room_size[2] / 2 meters.
    """

    width: int = 64
    height: int = 64
    room_size: tuple[float, float, float] = (6.0, 4.0, 10.0)
    box_count: tuple[int, int] = (3, 6)
    box_size_range: tuple[float, float] = (0.4, 1.4)
    cam_pos: tuple[float, float, float] = (0.0, 0.0, -1.5)
    cam_yaw: float = 0.0
    intrinsics: Optional[CameraIntrinsics] = None
    light_dir: tuple[float, float, float] = (-0.4, -0.8, -0.45)
    ambient: float = 0.35
    min_hit_distance: float = 0.5
    seed: int = 0

    def resolved_intrinsics(self) -> CameraIntrinsics:
        # ~85 degree FOV so side walls, floor, and ceiling are all visible
        if self.intrinsics is not None:
            return self.intrinsics
        return CameraIntrinsics(
            fx=0.55 * self.width, fy=0.55 * self.width,
            cx=(self.width - 1) / 2.0, cy=(self.height - 1) / 2.0,
        )

    def room_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        half = np.asarray(self.room_size, dtype=np.float64) / 2.0
        return -half, half


@dataclass
class DegradeSpec:
    """Stand-in error model for an upstream estimator: blur, then a smooth
    low-frequency bias field, then white noise; result clamped positive."""

    noise_sigma: float = 0.1
    blur_sigma: float = 1.5
    bias_amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.noise_sigma, self.blur_sigma, self.bias_amplitude) < 0:
            raise ValueError("degradation magnitudes must be >= 0")


@dataclass
class Scene:
    rgb: ImageTensor
    depth: DepthMap
    intrinsics: CameraIntrinsics
    maskset: MaskSet
    init_depth: Optional[DepthMap] = None


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _sample_boxes(spec: SceneSpec, rng: Rng) -> list[tuple[np.ndarray, np.ndarray]]:
    lo, hi = spec.room_bounds()
    cam = np.asarray(spec.cam_pos, dtype=np.float64)
    n = int(rng.integers(spec.box_count[0], spec.box_count[1] + 1))
    boxes = []
    attempts = 0
    while len(boxes) < n and attempts < 200:
        attempts += 1
        size = rng.uniform(spec.box_size_range[0], spec.box_size_range[1], 3)
        center = rng.uniform(lo + size / 2, hi - size / 2, 3)
        bmin, bmax = center - size / 2, center + size / 2
        # keep a clear bubble around the camera so depths stay >= min_hit_distance
        nearest = np.maximum(bmin - cam, np.maximum(0.0, cam - bmax))
        if np.linalg.norm(nearest) < spec.min_hit_distance:
            continue
        boxes.append((bmin, bmax))
    return boxes


def generate_scene(spec: SceneSpec, rng: Optional[Rng] = None) -> Scene:
    """Ray-cast the spec into (rgb, gt depth, intrinsics, instance masks).

    Depth is the camera-frame z distance, so a frontal wall is exactly flat;
    every pixel lands on exactly one instance (a wall face or a box).
    """
    rng = rng if rng is not None else Rng(spec.seed)
    k = spec.resolved_intrinsics()
    h, w = spec.height, spec.width
    cam = np.asarray(spec.cam_pos, dtype=np.float64)
    lo, hi = spec.room_bounds()
    if (cam <= lo).any() or (cam >= hi).any():
        raise ValueError("camera must be strictly inside the room")

    xs = (np.arange(w, dtype=np.float64) - k.cx) / k.fx
    ys = (np.arange(h, dtype=np.float64) - k.cy) / k.fy
    u, v = np.meshgrid(xs, ys)
    dirs = np.stack([u, v, np.ones_like(u)], axis=-1) @ _yaw_matrix(spec.cam_yaw).T

    # Room exit: per axis, the positive-t face along the ray direction.
    best_t = np.full((h, w), np.inf)
    best_id = np.zeros((h, w), dtype=np.int32)
    normals = np.zeros((h, w, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        for axis in range(3):
            d = dirs[..., axis]
            for sign, bound in ((1, hi[axis]), (-1, lo[axis])):
                t = np.where(sign * d > 0, (bound - cam[axis]) / d, np.inf)
                closer = t < best_t
                best_t = np.where(closer, t, best_t)
                face = 2 * axis + (0 if sign > 0 else 1)
                best_id = np.where(closer, face, best_id)
                for a2 in range(3):
                    normals[..., a2] = np.where(closer, -sign * (a2 == axis), normals[..., a2])

        boxes = _sample_boxes(spec, rng)
        for bi, (bmin, bmax) in enumerate(boxes):
            t1 = (bmin - cam) / dirs
            t2 = (bmax - cam) / dirs
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            t_enter = tmin.max(axis=-1)
            t_exit = tmax.min(axis=-1)
            hit = (t_enter <= t_exit) & (t_enter > 1e-9) & (t_enter < best_t)
            enter_axis = tmin.argmax(axis=-1)
            best_t = np.where(hit, t_enter, best_t)
            best_id = np.where(hit, 6 + bi, best_id)
            for a2 in range(3):
                face_n = -np.sign(dirs[..., a2]) * (enter_axis == a2)
                normals[..., a2] = np.where(hit, face_n, normals[..., a2])

    depth = best_t
    if not np.isfinite(depth).all() or depth.min() <= 0:
        raise ValueError("degenerate scene: some rays escaped the room")

    n_instances = 6 + len(boxes)
    albedo = rng.uniform(0.25, 0.95, size=(n_instances, 3))
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light /= np.linalg.norm(light)
    lambert = np.maximum(0.0, -(normals @ light))
    shade = spec.ambient + (1.0 - spec.ambient) * lambert
    rgb = albedo[best_id] * shade[..., None]
    rgb_t = ImageTensor(np.clip(rgb, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32))

    names = list(_FACE_NAMES) + [f"box_{i:02d}" for i in range(len(boxes))]
    masks = []
    for idx, name in enumerate(names):
        m = best_id == idx
        if m.any():
            masks.append((name, m))
    return Scene(rgb_t, DepthMap.full(depth.astype(np.float32)), k, MaskSet(h, w, masks))


def degrade(gt_depth: DepthMap, spec: DegradeSpec, rng: Optional[Rng] = None) -> DepthMap:
    """Blur, add a smooth bias field, add white noise, clamp positive.

    An all-zero spec is the identity.
    """
    rng = rng if rng is not None else Rng(spec.seed)
    d = gt_depth.depth.astype(np.float64)
    if spec.blur_sigma > 0:
        d = gaussian_blur_2d(d, spec.blur_sigma)
    if spec.bias_amplitude > 0:
        h, w = d.shape
        yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
        out = np.zeros_like(d)
        for _ in range(2):
            fx, fy = rng.uniform(0.5, 2.5, 2)
            phase = rng.uniform(0.0, 2 * np.pi)
            out += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        d = d + spec.bias_amplitude * out / 2.0
    if spec.noise_sigma > 0:
        d = d + rng.normal(0.0, spec.noise_sigma, size=d.shape)
    d = np.maximum(d, 0.01)
    return DepthMap(d.astype(np.float32), gt_depth.valid.copy())


# ---------------------------------------------------------------- dataset layout

def save_scene(scene: Scene, dirpath) -> None:
    """Write the formats layout: rgb.png, depth.png (mm PNG16),
    intrinsics.json, masks/, and init_depth.png when present."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    formats.save_image_png(scene.rgb, dirpath / "rgb.png")
    formats.save_depth(scene.depth, dirpath / "depth.png")
    formats.save_intrinsics(scene.intrinsics, dirpath / "intrinsics.json")
    formats.save_masks(scene.maskset, dirpath / "masks")
    if scene.init_depth is not None:
        formats.save_depth(scene.init_depth, dirpath / "init_depth.png")


def load_scene(dirpath) -> Scene:
    dirpath = Path(dirpath)
    rgb = formats.load_image_png(dirpath / "rgb.png")
    depth = formats.load_depth(dirpath / "depth.png")
    k = formats.load_intrinsics(dirpath / "intrinsics.json")
    maskset = formats.load_masks(dirpath / "masks")
    init_path = dirpath / "init_depth.png"
    init_depth = formats.load_depth(init_path) if init_path.exists() else None
    return Scene(rgb, depth, k, maskset, init_depth)


def generate_dataset(spec: SceneSpec, degrade_spec: Optional[DegradeSpec], count: int,
                     out_dir, seed: int) -> list[str]:
    """Write `count` scenes (seeded independently from `seed`) plus a manifest;
    returns the scene directory names."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(count):
        rng = Rng(seed, i)
        scene = generate_scene(spec, rng.child(0))
        if degrade_spec is not None:
            scene.init_depth = degrade(scene.depth, degrade_spec, rng.child(1))
        name = f"scene_{i:04d}"
        save_scene(scene, out_dir / name)
        names.append(name)
    manifest = {"count": count, "seed": seed, "scenes": names}
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return names
