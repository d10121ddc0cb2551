"""Multi-sample views of an RGB-D input: pixel-unshuffle grids, jittered random
crops, and segmentation-masked views, each carrying its full-resolution coverage."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import DepthMap, ImageTensor, Rng
from .formats import MaskSet

logger = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    """Knobs for the three sampling pipelines."""

    s_pud: int = 2
    n_r: int = 3
    crop_scale_range: tuple[float, float] = (0.2, 0.7)
    jitter_brightness: float = 0.1
    jitter_contrast: float = 0.1
    n_s: int = 4

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        if self.s_pud < 1:
            raise ValueError("s_pud must be >= 1")
        if self.n_r < 0 or self.n_s < 0:
            raise ValueError("sample counts must be >= 0")


@dataclass
class Sample:
    """One sampled view plus the full-resolution pixels it maps onto.

    kind is one of "full", "pud", "crop", "seg". Alignment back to full
    resolution is carried by the kind-specific fields: pud samples record
    their sub-grid index, stride, and the origin of the divisibility crop;
    crop samples their rect (x, y, w, h); seg samples their mask id.
    """

    kind: str
    rgb: ImageTensor
    depth: DepthMap
    coverage: np.ndarray
    pud_index: Optional[int] = None
    pud_origin: tuple[int, int] = (0, 0)
    pud_scale: int = 1
    rect: Optional[tuple[int, int, int, int]] = None
    mask_id: Optional[str] = None


def pud_crop_origin(height: int, width: int, s: int) -> tuple[int, int, int, int]:
    """(y0, x0, crop_h, crop_w) of the centered crop to dims divisible by s."""
    ch, cw = height - height % s, width - width % s
    return (height % s) // 2, (width % s) // 2, ch, cw


def unshuffle_array(a: np.ndarray, s: int) -> list[np.ndarray]:
    """Split the trailing (H, W) axes into s*s stride-s sub-grids.

    Sub-grid i holds source pixels at offsets (i mod s, i // s) in (x, y);
    dims must already be divisible by s.
    """
    if s < 1:
        raise ValueError("s must be >= 1")
    h, w = a.shape[-2:]
    if h % s or w % s:
        raise ValueError(f"dims ({h}, {w}) not divisible by s={s}")
    return [a[..., dy::s, dx::s] for dy in range(s) for dx in range(s)]


def shuffle_array(subs: list[np.ndarray], s: int) -> np.ndarray:
    """Exact inverse of unshuffle_array."""
    if len(subs) != s * s:
        raise ValueError(f"expected {s * s} sub-grids, got {len(subs)}")
    sh, sw = subs[0].shape[-2:]
    for sub in subs:
        if sub.shape != subs[0].shape:
            raise ValueError("sub-grid shapes differ")
    out = np.zeros(subs[0].shape[:-2] + (sh * s, sw * s), dtype=subs[0].dtype)
    for i, sub in enumerate(subs):
        out[..., i // s::s, i % s::s] = sub
    return out


def pixel_unshuffle(img: ImageTensor, s: int) -> list[ImageTensor]:
    """Decompose an image into s*s stride-s sub-images (center-cropping first
    when dims are not divisible by s)."""
    y0, x0, ch, cw = pud_crop_origin(img.height, img.width, s)
    cropped = img.data[:, y0:y0 + ch, x0:x0 + cw]
    return [ImageTensor(sub.copy()) for sub in unshuffle_array(cropped, s)]


def pixel_shuffle(subs: list[ImageTensor], s: int) -> ImageTensor:
    """Recompose s*s sub-images into the full-resolution image."""
    return ImageTensor(shuffle_array([sub.data for sub in subs], s))


def pixel_unshuffle_depth(d: DepthMap, s: int) -> list[DepthMap]:
    y0, x0, ch, cw = pud_crop_origin(d.height, d.width, s)
    depth_subs = unshuffle_array(d.depth[y0:y0 + ch, x0:x0 + cw], s)
    valid_subs = unshuffle_array(d.valid[y0:y0 + ch, x0:x0 + cw], s)
    return [DepthMap(dd.copy(), vv.copy()) for dd, vv in zip(depth_subs, valid_subs)]


def pixel_shuffle_depth(subs: list[DepthMap], s: int) -> DepthMap:
    return DepthMap(
        shuffle_array([sub.depth for sub in subs], s),
        shuffle_array([sub.valid for sub in subs], s),
    )


def _apply_jitter(rgb: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    if brightness == 0.0 and contrast == 1.0:
        return rgb.copy()
    return np.clip(contrast * (rgb - 0.5) + 0.5 + brightness, 0.0, 1.0)


def random_subsample(rgb: ImageTensor, depth: DepthMap, cfg: SamplerConfig, rng: Rng) -> list[Sample]:
    """Draw n_r aspect-preserving crops with photometric jitter on RGB only.

    Per crop the draw order is scale, x, y, brightness, contrast; jitter is
    clamp(c*(v-0.5)+0.5+b, 0, 1) and never touches depth.
    """
    h, w = rgb.height, rgb.width
    if (depth.height, depth.width) != (h, w):
        raise ValueError("rgb and depth dims differ")
    lo, hi = cfg.crop_scale_range
    out = []
    for _ in range(cfg.n_r):
        scale = float(rng.uniform(lo, hi))
        cw = max(1, int(round(scale * w)))
        ch = max(1, int(round(scale * h)))
        x = int(rng.integers(0, w - cw + 1))
        y = int(rng.integers(0, h - ch + 1))
        b = float(rng.uniform(-cfg.jitter_brightness, cfg.jitter_brightness))
        c = float(rng.uniform(1.0 - cfg.jitter_contrast, 1.0 + cfg.jitter_contrast))
        crop_rgb = _apply_jitter(rgb.data[:, y:y + ch, x:x + cw], b, c).astype(np.float32)
        coverage = np.zeros((h, w), dtype=bool)
        coverage[y:y + ch, x:x + cw] = True
        out.append(Sample(
            kind="crop",
            rgb=ImageTensor(crop_rgb),
            depth=DepthMap(depth.depth[y:y + ch, x:x + cw].copy(), depth.valid[y:y + ch, x:x + cw].copy()),
            coverage=coverage,
            rect=(x, y, cw, ch),
        ))
    return out


def select_masks(maskset: MaskSet, rgb: ImageTensor, depth: DepthMap, n_s: int, rng: Rng) -> list[Sample]:
    """Pick min(n_s, |masks|) masks without replacement; each sample keeps the
    full-resolution grids with out-of-mask RGB zeroed and depth invalidated."""
    if len(maskset) == 0:
        logger.warning("empty mask set: no segmentation samples")
        return []
    if (maskset.height, maskset.width) != (rgb.height, rgb.width):
        raise ValueError("mask dims do not match image dims")
    k = min(n_s, len(maskset))
    chosen = rng.choice_without_replacement(len(maskset), k)
    out = []
    for idx in chosen:
        name, mask = maskset.masks[int(idx)]
        out.append(Sample(
            kind="seg",
            rgb=ImageTensor(np.where(mask, rgb.data, 0.0).astype(np.float32)),
            depth=DepthMap(np.where(mask, depth.depth, 0.0).astype(np.float32), depth.valid & mask),
            coverage=mask.copy(),
            mask_id=name,
        ))
    return out


def build_sample_batch(rgb: ImageTensor, depth: DepthMap,
                       maskset: Optional[MaskSet], cfg: SamplerConfig, rng: Rng) -> list[Sample]:
    """Assemble [full] + s^2 pud + n_r crop + <=n_s seg samples, in that order.

    Random draws happen sequentially from the single rng (crops first, then
    mask choice), so a fixed seed gives a byte-deterministic batch. s_pud = 1
    adds no pud samples (they would duplicate the full view).
    """
    h, w = rgb.height, rgb.width
    if (depth.height, depth.width) != (h, w):
        raise ValueError("rgb and depth dims differ")
    samples = [Sample(
        kind="full",
        rgb=ImageTensor(rgb.data.copy()),
        depth=DepthMap(depth.depth.copy(), depth.valid.copy()),
        coverage=np.ones((h, w), dtype=bool),
    )]
    s = cfg.s_pud
    if s > 1:
        y0, x0, ch, cw = pud_crop_origin(h, w, s)
        rgb_subs = pixel_unshuffle(rgb, s)
        depth_subs = pixel_unshuffle_depth(depth, s)
        for i, (rs, ds) in enumerate(zip(rgb_subs, depth_subs)):
            coverage = np.zeros((h, w), dtype=bool)
            coverage[y0 + i // s:y0 + ch:s, x0 + i % s:x0 + cw:s] = True
            samples.append(Sample(
                kind="pud", rgb=rs, depth=ds, coverage=coverage,
                pud_index=i, pud_origin=(y0, x0), pud_scale=s,
            ))
    samples.extend(random_subsample(rgb, depth, cfg, rng))
    if maskset is not None and cfg.n_s > 0:
        samples.extend(select_masks(maskset, rgb, depth, cfg.n_s, rng))
    return samples
