"""Bit-exact file I/O: PNG images, depth maps (mm PNG16 / PFM), intrinsics JSON,
PLY point clouds, MDPT weight tables, and mask sets."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .core import CameraIntrinsics, DepthMap, ImageTensor
from .geometry import PointCloud

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"MDPT"
WEIGHTS_VERSION = 1


class FormatError(ValueError):
    """A file does not match its declared format."""


# ---------------------------------------------------------------- images

def load_image_png(path) -> ImageTensor:
    """Load an 8- or 16-bit gray/RGB PNG as a [0, 1] image tensor."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"cannot read PNG {path}")
    if raw.ndim == 3 and raw.shape[2] == 4:
        raise FormatError(f"alpha channel not supported: {path}")
    if raw.dtype == np.uint8:
        maxval = 255.0
    elif raw.dtype == np.uint16:
        maxval = 65535.0
    else:
        raise FormatError(f"unsupported PNG sample type {raw.dtype} in {path}")
    if raw.ndim == 2:
        data = raw[None].astype(np.float32) / maxval
    else:
        data = raw[:, :, ::-1].transpose(2, 0, 1).astype(np.float32) / maxval  # BGR -> RGB
    return ImageTensor(data)


def save_image_png(img: ImageTensor, path, bit_depth: int = 8) -> None:
    """Write an image tensor as a gray or RGB PNG at the given bit depth."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    maxval = 255 if bit_depth == 8 else 65535
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    arr = np.clip(np.round(img.data * maxval), 0, maxval).astype(dtype)
    if img.channels == 1:
        out = arr[0]
    elif img.channels == 3:
        out = arr.transpose(1, 2, 0)[:, :, ::-1]  # RGB -> BGR
    else:
        raise ValueError(f"cannot encode {img.channels}-channel image as PNG")
    if not cv2.imwrite(str(path), out):
        raise OSError(f"failed to write {path}")


# ---------------------------------------------------------------- depth

def load_depth(path, unit: str = "millimeter_png16") -> DepthMap:
    """Load a depth map; mm PNG16 divides by 1000 and treats 0 as invalid."""
    if unit == "millimeter_png16":
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise FormatError(f"cannot read depth PNG {path}")
        if raw.ndim != 2 or raw.dtype != np.uint16:
            raise FormatError(f"{path} is not a single-channel 16-bit PNG")
        valid = raw > 0
        return DepthMap(raw.astype(np.float32) / 1000.0, valid)
    if unit == "pfm_meters":
        data = load_pfm(path)
        if data.ndim != 2:
            raise FormatError(f"{path}: expected single-channel PFM for depth")
        negatives = int((data < 0).sum())
        if negatives:
            logger.warning("%s: %d negative depth samples marked invalid", path, negatives)
        valid = data > 0
        depth = np.where(valid, data, 0.0).astype(np.float32)
        return DepthMap(depth, valid)
    raise ValueError(f"unknown depth unit {unit!r}")


def save_depth(d: DepthMap, path, unit: str = "millimeter_png16") -> None:
    """Write a depth map; invalid pixels are stored as 0."""
    if unit == "millimeter_png16":
        mm = np.zeros((d.height, d.width), dtype=np.uint16)
        mm[d.valid] = np.clip(np.round(d.depth[d.valid].astype(np.float64) * 1000.0), 1, 65535).astype(np.uint16)
        if not cv2.imwrite(str(path), mm):
            raise OSError(f"failed to write {path}")
        return
    if unit == "pfm_meters":
        save_pfm(np.where(d.valid, d.depth, 0.0).astype(np.float32), path)
        return
    raise ValueError(f"unknown depth unit {unit!r}")


def load_pfm(path) -> np.ndarray:
    """Read a PFM file ("Pf" gray / "PF" color); scale sign gives endianness,
    its magnitude is applied as a multiplicative factor. Rows are stored
    bottom-to-top and flipped on read."""
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"Pf":
            channels = 1
        elif header == b"PF":
            channels = 3
        else:
            raise FormatError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError(f"{path}: malformed PFM dimensions")
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        if scale == 0:
            raise FormatError(f"{path}: PFM scale must be nonzero")
        endian = "<" if scale < 0 else ">"
        count = width * height * channels
        buf = f.read(count * 4)
        if len(buf) != count * 4:
            raise FormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(buf, dtype=endian + "f4").reshape(height, width, channels)
    data = np.flipud(data).astype(np.float32)
    mag = abs(scale)
    if mag != 1.0:
        data = data * np.float32(mag)
    return data[:, :, 0] if channels == 1 else data


def save_pfm(data: np.ndarray, path) -> None:
    """Write a single- or three-channel float32 PFM, little-endian (scale -1)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header, payload = b"Pf", data[:, :, None]
    elif data.ndim == 3 and data.shape[2] == 3:
        header, payload = b"PF", data
    else:
        raise ValueError(f"cannot encode shape {data.shape} as PFM")
    h, w = payload.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(payload).astype("<f4").tobytes())


# ---------------------------------------------------------------- intrinsics

def load_intrinsics(path) -> CameraIntrinsics:
    """Parse {"fx","fy","cx","cy"} from JSON; unknown fields are ignored."""
    with open(path) as f:
        obj = json.load(f)
    try:
        vals = {k: float(obj[k]) for k in ("fx", "fy", "cx", "cy")}
    except KeyError as e:
        raise FormatError(f"{path}: missing intrinsics field {e.args[0]!r}") from None
    except (TypeError, ValueError):
        raise FormatError(f"{path}: intrinsics fields must be numeric") from None
    try:
        return CameraIntrinsics(**vals)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def save_intrinsics(k: CameraIntrinsics, path) -> None:
    with open(path, "w") as f:
        json.dump({"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy}, f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------- PLY

def save_ply(pc: PointCloud, path, binary: bool = True) -> None:
    """Write x,y,z float32 + red,green,blue uchar vertices (PLY 1.0).

    Colorless clouds are written white.
    """
    n = len(pc)
    colors = pc.colors if pc.colors is not None else np.full((n, 3), 255, dtype=np.uint8)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    pts = pc.points.astype(np.float32)
    with open(path, "wb") as f:
        f.write(header.encode())
        if binary:
            rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            rec["xyz"] = pts
            rec["rgb"] = colors
            f.write(rec.tobytes())
        else:
            lines = []
            for p, c in zip(pts, colors):
                lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
            f.write("".join(lines).encode())


def load_ply(path) -> PointCloud:
    """Reparse a PLY written by save_ply (xyz float32 + rgb uchar layout)."""
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        fmt = None
        n = None
        props = []
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: unterminated PLY header")
            parts = line.split()
            if not parts:
                continue
            if parts[0] == b"format":
                fmt = parts[1].decode()
            elif parts[0] == b"element" and parts[1] == b"vertex":
                n = int(parts[2])
            elif parts[0] == b"property":
                props.append(parts[2].decode())
            elif parts[0] == b"end_header":
                break
        if n is None or fmt is None:
            raise FormatError(f"{path}: missing vertex element or format")
        if props != ["x", "y", "z", "red", "green", "blue"]:
            raise FormatError(f"{path}: unsupported vertex layout {props}")
        if fmt == "binary_little_endian":
            rec = np.frombuffer(f.read(n * 15), dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            if len(rec) != n:
                raise FormatError(f"{path}: truncated vertex data")
            return PointCloud(rec["xyz"].astype(np.float64), rec["rgb"].copy())
        if fmt == "ascii":
            pts = np.zeros((n, 3), dtype=np.float64)
            cols = np.zeros((n, 3), dtype=np.uint8)
            for i in range(n):
                tok = f.readline().split()
                pts[i] = [float(t) for t in tok[:3]]
                cols[i] = [int(t) for t in tok[3:6]]
            return PointCloud(pts, cols)
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")


# ---------------------------------------------------------------- weights (MDPT)

def save_weights(table: dict[str, np.ndarray], path, version: int = WEIGHTS_VERSION) -> None:
    """Write a named-tensor table: magic, version, count, then per entry a
    length-prefixed UTF-8 name, u32 rank + sizes, and little-endian f32 data."""
    names = list(table.keys())
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", version, len(names)))
        for name in names:
            arr = np.ascontiguousarray(table[name], dtype=np.float32)
            blob = name.encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            f.write(arr.astype("<f4").tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    """Load an MDPT table, preserving entry order."""
    with open(path, "rb") as f:
        if f.read(4) != WEIGHTS_MAGIC:
            raise FormatError(f"{path}: bad magic (not an MDPT file)")
        version, count = struct.unpack("<II", f.read(8))
        if version != WEIGHTS_VERSION:
            raise FormatError(f"{path}: unsupported MDPT version {version}")
        table: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            buf = f.read(4 * n)
            if len(buf) != 4 * n:
                raise FormatError(f"{path}: tensor {name!r} payload truncated")
            if name in table:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            table[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return table


# ---------------------------------------------------------------- masks

@dataclass
class MaskSet:
    """Named boolean masks sharing one image size."""

    height: int
    width: int
    masks: list[tuple[str, np.ndarray]]

    def __post_init__(self):
        for name, m in self.masks:
            if m.shape != (self.height, self.width):
                raise ValueError(f"mask {name!r} shape {m.shape} != ({self.height}, {self.width})")
            if not m.any():
                raise ValueError(f"mask {name!r} is empty")

    def __len__(self) -> int:
        return len(self.masks)


def load_masks(path) -> MaskSet:
    """Load masks from a directory of binary PNGs (nonzero = member, ids from
    filename stems) or from a single indexed PNG8 (one mask per nonzero label)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise FormatError(f"no mask PNGs found in {path}")
        masks = []
        dims = None
        for fp in files:
            arr = np.array(Image.open(fp))
            if arr.ndim == 3:
                arr = arr[..., :3].any(axis=2)
            m = arr > 0
            if dims is None:
                dims = m.shape
            elif m.shape != dims:
                raise FormatError(f"mask {fp.name} dims {m.shape} != {dims}")
            if m.any():
                masks.append((fp.stem, m))
        if not masks:
            logger.warning("all masks in %s are empty", path)
            return MaskSet(dims[0], dims[1], [])
        return MaskSet(dims[0], dims[1], masks)
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise FormatError(f"{path}: indexed mask PNG must be palette or 8-bit gray, got {img.mode}")
    labels = np.array(img, dtype=np.int32)
    masks = [(f"label_{v:03d}", labels == v) for v in np.unique(labels) if v != 0]
    if not masks:
        logger.warning("indexed mask %s has no nonzero labels", path)
    return MaskSet(labels.shape[0], labels.shape[1], masks)


def save_masks(maskset: MaskSet, dirpath) -> None:
    """Write each mask as a binary PNG named by its id."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    for name, m in maskset.masks:
        Image.fromarray((m.astype(np.uint8)) * 255, mode="L").save(dirpath / f"{name}.png")
