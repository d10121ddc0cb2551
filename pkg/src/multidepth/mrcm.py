"""Multi-resolution consistency module: align every refined sample back to the
full-resolution grid and aggregate per pixel by the mean of k median values."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rnet
from .core import DepthMap, ImageTensor, Rng, resize_depth
from .formats import MaskSet
from .sampling import Sample, SamplerConfig, build_sample_batch


@dataclass
class MrcmConfig:
    k: int = 3
    min_support: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.min_support < 1:
            raise ValueError("min_support must be >= 1")


@dataclass
class StackLayer:
    """One aligned partial prediction: full-res depth, validity, provenance tag."""

    depth: np.ndarray
    valid: np.ndarray
    tag: str


@dataclass
class PredictionStack:
    height: int
    width: int
    layers: list[StackLayer] = field(default_factory=list)

    def add(self, layer: StackLayer) -> None:
        if layer.depth.shape != (self.height, self.width) or layer.valid.shape != (self.height, self.width):
            raise ValueError("layer dims do not match stack dims")
        self.layers.append(layer)


def align_to_full(sample: Sample, refined: DepthMap, full_hw: tuple[int, int]) -> StackLayer:
    """Place a refined sample into full-resolution coordinates.

    Pud layers go in by exact inverse indexing (no interpolation); crop and
    seg layers are pasted into their rect / under their mask. A layer refined
    below its target resolution is bilinearly upscaled first.
    """
    h, w = full_hw
    depth = np.zeros((h, w), dtype=np.float32)
    valid = np.zeros((h, w), dtype=bool)
    if sample.kind == "pud":
        s = sample.pud_scale
        y0, x0 = sample.pud_origin
        i = sample.pud_index
        ys = slice(y0 + i // s, y0 + i // s + s * refined.height, s)
        xs = slice(x0 + i % s, x0 + i % s + s * refined.width, s)
        if depth[ys, xs].shape != (refined.height, refined.width):
            raise ValueError("pud layer does not fit the full-res grid")
        depth[ys, xs] = refined.depth
        valid[ys, xs] = refined.valid
    elif sample.kind == "crop":
        x, y, cw, ch = sample.rect
        if x < 0 or y < 0 or x + cw > w or y + ch > h:
            raise ValueError(f"crop rect {sample.rect} outside full dims ({h}, {w})")
        if (refined.height, refined.width) != (ch, cw):
            refined = resize_depth(refined, ch, cw)
        depth[y:y + ch, x:x + cw] = refined.depth
        valid[y:y + ch, x:x + cw] = refined.valid
    elif sample.kind in ("full", "seg"):
        if (refined.height, refined.width) != (h, w):
            refined = resize_depth(refined, h, w)
        depth = refined.depth.copy()
        valid = refined.valid & sample.coverage if sample.kind == "seg" else refined.valid.copy()
    else:
        raise ValueError(f"unknown sample kind {sample.kind!r}")
    if (valid & ~sample.coverage).any():
        raise ValueError("aligned layer is valid outside its declared coverage")
    return StackLayer(depth, valid, sample.kind)


def aggregate(stack: PredictionStack, cfg: MrcmConfig) -> DepthMap:
    """Per pixel: sort the valid predictions ascending; with m >= k values take
    the mean of the k consecutive ones starting at floor((m-k)/2), otherwise
    the mean of all m; m = 0 (or m < min_support with no full layer) is invalid.
    """
    if not stack.layers:
        raise ValueError("empty prediction stack")
    vals = np.stack([layer.depth for layer in stack.layers]).astype(np.float64)
    ok = np.stack([layer.valid for layer in stack.layers])
    vals[~ok] = np.inf
    vals.sort(axis=0)
    m = ok.sum(axis=0)
    k = cfg.k
    start = np.where(m >= k, (m - k) // 2, 0)
    length = np.minimum(m, k)
    acc = np.zeros((stack.height, stack.width), dtype=np.float64)
    nlayers = len(stack.layers)
    for j in range(k):
        idx = np.minimum(start + j, nlayers - 1)
        term = np.take_along_axis(vals, idx[None], axis=0)[0]
        acc += np.where(j < length, term, 0.0)
    out = np.zeros((stack.height, stack.width), dtype=np.float32)
    covered = m > 0
    out[covered] = (acc[covered] / length[covered]).astype(np.float32)
    if cfg.min_support > 1:
        full = next((l for l in stack.layers if l.tag == "full"), None)
        if full is not None:
            weak = covered & (m < cfg.min_support) & full.valid
            out[weak] = full.depth[weak]
    return DepthMap(out, covered)


@dataclass
class PipelineState:
    """Everything one refinement iteration needs."""

    rgb: ImageTensor
    depth: DepthMap
    maskset: Optional[MaskSet]
    weights: dict[str, np.ndarray]
    rnet_cfg: rnet.RNetConfig
    sampler_cfg: SamplerConfig
    mrcm_cfg: MrcmConfig


def run_iteration(state: PipelineState, rng: Rng) -> DepthMap:
    """One refinement cycle: perturb the current depth (sigma_d), build the
    sample batch from it, refine every sample, align, and aggregate.

    With the identity refiner and sigma_d = 0 this is an exact fixed point.
    """
    depth = state.depth
    if not depth.valid.any():
        raise ValueError("current depth has no valid pixels")
    sigma = state.rnet_cfg.depth_noise_sigma
    if sigma > 0:
        eta = rng.normal(0.0, sigma, size=depth.depth.shape).astype(np.float32)
        noisy = np.where(depth.valid, depth.depth * np.exp(eta), 0).astype(np.float32)
        depth = DepthMap(noisy, depth.valid.copy())
    batch = build_sample_batch(state.rgb, depth, state.maskset, state.sampler_cfg, rng)
    stack = PredictionStack(depth.height, depth.width)
    for sample in batch:
        if not sample.depth.valid.any():
            continue
        refined = rnet.refine(state.weights, state.rnet_cfg, sample.rgb, sample.depth)
        stack.add(align_to_full(sample, refined, (depth.height, depth.width)))
    return aggregate(stack, state.mrcm_cfg)
