"""Grid primitives shared by the whole pipeline: images, depth maps, intrinsics, RNG.

Conventions: images are (C, H, W) float32 in [0, 1]; depth maps are (H, W)
float32 meters with a boolean validity mask; pixel centers sit on integer
coordinates. Resampling enlarges with a bilinear (optionally bicubic) kernel
and shrinks with area averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericError(RuntimeError):
    """Raised when a computation produced or received non-finite values."""


@dataclass
class ImageTensor:
    """A (C, H, W) grid of float32 intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.size == 0:
            raise ValueError(f"image must be non-empty (C, H, W), got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("image contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class DepthMap:
    """An (H, W) grid of metric depths with per-pixel validity.

    Valid depths are finite and strictly positive; invalid pixels carry an
    unspecified value (0 by convention) and are excluded from every loss and
    metric downstream.
    """

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float32)
        self.valid = np.ascontiguousarray(self.valid, dtype=bool)
        if self.depth.ndim != 2 or self.depth.size == 0:
            raise ValueError(f"depth must be non-empty (H, W), got shape {self.depth.shape}")
        if self.depth.shape != self.valid.shape:
            raise ValueError("depth and valid shapes differ")
        vals = self.depth[self.valid]
        if vals.size and (not np.isfinite(vals).all() or vals.min() <= 0.0):
            raise ValueError("valid depths must be finite and > 0")

    @classmethod
    def full(cls, depth: np.ndarray) -> "DepthMap":
        """Wrap an array of depths that is valid everywhere."""
        depth = np.asarray(depth, dtype=np.float32)
        return cls(depth, np.ones(depth.shape, dtype=bool))

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass
class CameraIntrinsics:
    """Pinhole parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        self.fx, self.fy = float(self.fx), float(self.fy)
        self.cx, self.cy = float(self.cx), float(self.cy)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


class Rng:
    """Deterministic random stream: PCG64 seeded through SeedSequence.

    The generator algorithm is pinned to numpy's PCG64 so a fixed seed yields
    a byte-identical draw sequence across runs. Derived streams come from
    `child`, which extends the seed-sequence entropy with integer keys, so
    sub-streams are independent of draw order in the parent.
    """

    def __init__(self, seed: int, *key: int):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.key])))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, *self.key, *key)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        return self._gen.uniform(lo, hi, size)

    def normal(self, mu: float = 0.0, sigma: float = 1.0, size=None):
        return self._gen.normal(mu, sigma, size)

    def integers(self, lo: int, hi: int, size=None):
        """Draw integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)


def _axis_weights(n_in: int, n_out: int, method: str) -> np.ndarray:
    """Row-stochastic (n_out, n_in) resampling matrix for one axis.

    Enlarging uses the requested interpolation kernel on half-pixel-aligned
    centers; shrinking integrates over the output cell (area averaging).
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("resize dims must be >= 1")
    if n_out == n_in:
        return np.eye(n_in, dtype=np.float64)
    w = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out > n_in:
        scale = n_in / n_out
        src = (np.arange(n_out) + 0.5) * scale - 0.5
        if method == "bilinear":
            i0 = np.floor(src).astype(np.int64)
            frac = src - i0
            for tap, wt in ((i0, 1.0 - frac), (i0 + 1, frac)):
                idx = np.clip(tap, 0, n_in - 1)
                np.add.at(w, (np.arange(n_out), idx), wt)
        elif method == "bicubic":
            i0 = np.floor(src).astype(np.int64)
            frac = src - i0
            for off in (-1, 0, 1, 2):
                wt = _cubic_kernel(frac - off)
                idx = np.clip(i0 + off, 0, n_in - 1)
                np.add.at(w, (np.arange(n_out), idx), wt)
        else:
            raise ValueError(f"unknown resize method {method!r}")
    else:
        # Area averaging: input cell [j, j+1) overlaps output cell [i*r, (i+1)*r).
        r = n_in / n_out
        for i in range(n_out):
            lo, hi = i * r, (i + 1) * r
            j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
            for j in range(j0, min(j1, n_in)):
                w[i, j] = min(hi, j + 1) - max(lo, j)
    w /= w.sum(axis=1, keepdims=True)
    return w


def _cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel (Catmull-Rom at a = -0.5)."""
    x = np.abs(x)
    out = np.zeros_like(x)
    m1 = x <= 1
    out[m1] = ((a + 2) * x[m1] - (a + 3)) * x[m1] ** 2 + 1
    m2 = (x > 1) & (x < 2)
    out[m2] = a * (((x[m2] - 5) * x[m2] + 8) * x[m2] - 4)
    return out


def _resize_grid(grid: np.ndarray, out_h: int, out_w: int, method: str) -> np.ndarray:
    """Resize a (..., H, W) array in float64 with separable axis weights."""
    h, w = grid.shape[-2:]
    wr = _axis_weights(h, out_h, method)
    wc = _axis_weights(w, out_w, method)
    out = np.einsum("oh,...hw->...ow", wr, grid.astype(np.float64))
    return np.einsum("pw,...ow->...op", wc, out)


def resize_bilinear(img: ImageTensor, out_h: int, out_w: int, method: str = "bilinear") -> ImageTensor:
    """Resize an image; bilinear (or bicubic) when enlarging, area when shrinking.

    Identity dims return a bit-identical copy. Output is clamped to [0, 1]
    (bicubic can overshoot).
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    if (out_h, out_w) == (img.height, img.width):
        return ImageTensor(img.data.copy())
    out = _resize_grid(img.data, out_h, out_w, method)
    return ImageTensor(np.clip(out, 0.0, 1.0).astype(np.float32))


def resize_depth(d: DepthMap, out_h: int, out_w: int) -> DepthMap:
    """Resize a depth map, interpolating among valid pixels only.

    Weights are renormalized over valid contributors; an output pixel is
    valid iff at least one contributing source pixel is valid. All-invalid
    input yields an all-invalid output.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    if (out_h, out_w) == (d.height, d.width):
        return DepthMap(d.depth.copy(), d.valid.copy())
    mask = d.valid.astype(np.float64)
    num = _resize_grid(d.depth * mask, out_h, out_w, "bilinear")
    den = _resize_grid(mask, out_h, out_w, "bilinear")
    valid = den > 1e-9
    depth = np.zeros((out_h, out_w), dtype=np.float32)
    depth[valid] = (num[valid] / den[valid]).astype(np.float32)
    return DepthMap(depth, valid)


def gaussian_blur_2d(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of an (H, W) array.

    Kernel truncated at +-3 sigma and renormalized; reflect padding at the
    borders. sigma = 0 is the identity.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError("expected a non-empty (H, W) array")
    if sigma == 0:
        return arr.copy()
    radius = max(1, int(np.ceil(3.0 * sigma)))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = arr.astype(np.float64)
    for axis in range(2):
        n = out.shape[axis]
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        mode = "reflect" if n > 1 else "edge"
        padded = np.pad(out, pad, mode=mode)
        acc = np.zeros_like(out)
        for k, t in enumerate(taps):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(k, k + n)
            acc += t * padded[tuple(sl)]
        out = acc
    return out.astype(arr.dtype if arr.dtype == np.float64 else np.float32)


def gaussian_blur(img: ImageTensor, sigma: float) -> ImageTensor:
    """Per-channel Gaussian blur of an image (see gaussian_blur_2d)."""
    if sigma == 0:
        return ImageTensor(img.data.copy())
    out = np.stack([gaussian_blur_2d(c, sigma) for c in img.data])
    return ImageTensor(np.clip(out, 0.0, 1.0).astype(np.float32))
