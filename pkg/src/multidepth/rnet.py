"""Refinement network: a small RGB-D encoder-decoder with skip connections,
exact analytic gradients, and an AdamW optimizer, all in numpy.

The network predicts a log-space residual r on the input depth; the refined
depth is d_in * exp(clamp(r)), so a zero-initialized head makes the untrained
network an exact identity refiner and the output is positive by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import DepthMap, ImageTensor, NumericError, Rng

IN_CHANNELS = 4  # RGB + median-normalized log depth


@dataclass
class RNetConfig:
    levels: int = 3
    base_channels: int = 16
    kernel_size: int = 3
    depth_noise_sigma: float = 0.02
    residual_clamp: float = 2.0

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError("levels and base_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 1")
        if self.residual_clamp <= 0:
            raise ValueError("residual_clamp must be > 0")

    def channels(self, level: int) -> int:
        return self.base_channels * (1 << level)


def layer_specs(cfg: RNetConfig) -> list[tuple[str, int, int]]:
    """(name, c_in, c_out) for every conv layer, in canonical order.

    Downsampling is a stride-2 conv, upsampling nearest-neighbor + conv, skip
    connections concatenate channels; the head is linear (no rectifier).
    """
    specs = [("enc0", IN_CHANNELS, cfg.channels(0))]
    for i in range(1, cfg.levels):
        specs.append((f"down{i}", cfg.channels(i - 1), cfg.channels(i)))
        specs.append((f"enc{i}", cfg.channels(i), cfg.channels(i)))
    for i in range(cfg.levels - 1, 0, -1):
        specs.append((f"up{i}", cfg.channels(i), cfg.channels(i - 1)))
        specs.append((f"dec{i}", 2 * cfg.channels(i - 1), cfg.channels(i - 1)))
    specs.append(("head", cfg.channels(0), 1))
    return specs


def init_weights(cfg: RNetConfig, rng: Rng, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in-scaled normal init (rectifier gain), zero biases, zero head.

    The zero head makes the fresh network the identity refiner.
    """
    k = cfg.kernel_size
    weights: dict[str, np.ndarray] = {}
    for name, c_in, c_out in layer_specs(cfg):
        if name == "head":
            w = np.zeros((c_out, c_in, k, k))
        else:
            std = np.sqrt(2.0 / (c_in * k * k))
            w = rng.normal(0.0, std, size=(c_out, c_in, k, k))
        weights[f"{name}.w"] = w.astype(dtype)
        weights[f"{name}.b"] = np.zeros(c_out, dtype=dtype)
    return weights


def weights_dtype(weights: dict[str, np.ndarray]):
    return weights["enc0.w"].dtype


# ---------------------------------------------------------------- conv plumbing

def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad:
        xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((c, k, k, ho, wo), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, ky, kx] = xp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    return cols.reshape(c * k * k, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, xshape: tuple, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    c, h, w = xshape
    dxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dcols = dcols.reshape(c, k, k, ho, wo)
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += dcols[:, ky, kx]
    return dxp[:, pad:h + pad, pad:w + pad] if pad else dxp


def _conv_forward(x, w, b, stride, pad):
    c_out = w.shape[0]
    cols, ho, wo = _im2col(x, w.shape[2], stride, pad)
    y = (w.reshape(c_out, -1) @ cols + b[:, None]).reshape(c_out, ho, wo)
    return y, cols


def _conv_backward(dy, cols, xshape, w, stride, pad):
    c_out = w.shape[0]
    dy_mat = dy.reshape(c_out, -1)
    dw = (dy_mat @ cols.T).reshape(w.shape)
    db = dy_mat.sum(axis=1)
    dcols = w.reshape(c_out, -1).T @ dy_mat
    dx = _col2im(dcols, xshape, w.shape[2], stride, pad, dy.shape[1], dy.shape[2])
    return dw, db, dx


def _upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample2_backward(dy: np.ndarray) -> np.ndarray:
    c, h2, w2 = dy.shape
    return dy.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))


# ---------------------------------------------------------------- forward / backward

def forward(weights: dict[str, np.ndarray], cfg: RNetConfig, rgbd: np.ndarray) -> tuple[np.ndarray, dict]:
    """Run the network on a (4, H, W) array; returns the (H, W) log residual
    and the cache needed by backward. H, W must be divisible by 2^(levels-1)."""
    if rgbd.ndim != 3 or rgbd.shape[0] != IN_CHANNELS:
        raise ValueError(f"expected ({IN_CHANNELS}, H, W) input, got {rgbd.shape}")
    m = 1 << (cfg.levels - 1)
    if rgbd.shape[1] % m or rgbd.shape[2] % m:
        raise ValueError(f"dims {rgbd.shape[1:]} not divisible by {m}")
    k = cfg.kernel_size
    pad = k // 2
    cache: dict = {}

    def conv(name, x, stride=1, relu=True):
        w, b = weights[f"{name}.w"], weights[f"{name}.b"]
        if w.shape[1] != x.shape[0]:
            raise ValueError(f"layer {name}: weight expects {w.shape[1]} channels, got {x.shape[0]}")
        y, cols = _conv_forward(x, w, b, stride, pad)
        mask = None
        if relu:
            mask = y > 0
            np.maximum(y, 0, out=y)
        cache[name] = (cols, x.shape, stride, mask)
        return y

    skips = []
    cur = conv("enc0", rgbd)
    for i in range(1, cfg.levels):
        skips.append(cur)
        cur = conv(f"down{i}", cur, stride=2)
        cur = conv(f"enc{i}", cur)
    for i in range(cfg.levels - 1, 0, -1):
        cur = conv(f"up{i}", _upsample2(cur))
        cur = conv(f"dec{i}", np.concatenate([cur, skips[i - 1]], axis=0))
    r = conv("head", cur, relu=False)
    return r[0], cache


def backward(weights: dict[str, np.ndarray], cfg: RNetConfig, cache: dict,
             grad_residual: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of forward's residual w.r.t. every parameter."""
    k = cfg.kernel_size
    pad = k // 2
    grads: dict[str, np.ndarray] = {}

    def conv_bwd(name, dy):
        if name not in cache:
            raise ValueError(f"cache is missing layer {name!r}")
        cols, xshape, stride, mask = cache[name]
        if mask is not None:
            dy = dy * mask
        dw, db, dx = _conv_backward(dy, cols, xshape, weights[f"{name}.w"], stride, pad)
        grads[f"{name}.w"] = grads.get(f"{name}.w", 0) + dw
        grads[f"{name}.b"] = grads.get(f"{name}.b", 0) + db
        return dx

    d = conv_bwd("head", grad_residual[None].astype(weights_dtype(weights)))
    d_skip: dict[int, np.ndarray] = {}
    for i in range(1, cfg.levels):
        d_cat = conv_bwd(f"dec{i}", d)
        c = cfg.channels(i - 1)
        d_skip[i - 1] = d_cat[c:]
        d = _upsample2_backward(conv_bwd(f"up{i}", d_cat[:c]))
    for i in range(cfg.levels - 1, 0, -1):
        d = conv_bwd(f"down{i}", conv_bwd(f"enc{i}", d))
        d = d + d_skip[i - 1]
    conv_bwd("enc0", d)
    return grads


# ---------------------------------------------------------------- refinement

@dataclass
class RefineResult:
    """Refined depth plus everything needed to backpropagate through refine."""

    depth: DepthMap                 # float32, for the pipeline
    depth_raw: np.ndarray           # (H, W) in the weights dtype, 0 where invalid
    valid: np.ndarray
    residual: np.ndarray            # raw (pre-clamp) log residual
    clamp_mask: np.ndarray          # where the clamp is inactive
    cache: dict
    padded_hw: tuple[int, int]


def _pad_to_multiple(x: np.ndarray, m: int) -> np.ndarray:
    """Reflect-pad the trailing (H, W) axes up to multiples of m (bottom/right);
    falls back to edge padding when an axis is too short to reflect."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x
    for axis, p in ((x.ndim - 2, ph), (x.ndim - 1, pw)):
        if p == 0:
            continue
        pad = [(0, 0)] * x.ndim
        pad[axis] = (0, p)
        mode = "reflect" if x.shape[axis] > p else "edge"
        x = np.pad(x, pad, mode=mode)
    return x


def refine_with_cache(weights: dict[str, np.ndarray], cfg: RNetConfig, rgb: ImageTensor,
                      depth_in: DepthMap, sigma_d: float = 0.0,
                      rng: Optional[Rng] = None) -> RefineResult:
    """Refine a depth map, keeping the forward cache for training.

    The depth input channel is log depth normalized by the per-image median
    (after multiplicative log-normal noise of relative scale sigma_d); the
    output is d_in * exp(clamp(r, +-residual_clamp)). Invalid pixels stay
    invalid and never see noise.
    """
    if (rgb.height, rgb.width) != (depth_in.height, depth_in.width):
        raise ValueError("rgb and depth dims differ")
    if rgb.channels != 3:
        raise ValueError(f"expected 3-channel rgb, got {rgb.channels}")
    valid = depth_in.valid
    if not valid.any():
        raise ValueError("all-invalid depth: nothing to refine")
    dt = weights_dtype(weights)
    d = np.where(valid, depth_in.depth, 0).astype(dt)
    if sigma_d > 0:
        if rng is None:
            raise ValueError("sigma_d > 0 requires an rng")
        eta = rng.normal(0.0, sigma_d, size=d.shape).astype(dt)
        d_noisy = np.where(valid, d * np.exp(eta), 0)
    else:
        d_noisy = d
    med = float(np.median(d_noisy[valid]))
    ch4 = np.zeros_like(d_noisy)
    ch4[valid] = np.log(d_noisy[valid] / med)
    x = np.concatenate([rgb.data.astype(dt), ch4[None]], axis=0)
    x = _pad_to_multiple(x, 1 << (cfg.levels - 1))
    r_pad, cache = forward(weights, cfg, x)
    h, w = d.shape
    r = r_pad[:h, :w]
    rc = np.clip(r, -cfg.residual_clamp, cfg.residual_clamp)
    clamp_mask = np.abs(r) < cfg.residual_clamp
    depth_raw = np.where(valid, d * np.exp(rc), 0)
    return RefineResult(
        depth=DepthMap(depth_raw.astype(np.float32), valid.copy()),
        depth_raw=depth_raw,
        valid=valid.copy(),
        residual=r,
        clamp_mask=clamp_mask,
        cache=cache,
        padded_hw=r_pad.shape,
    )


def refine(weights: dict[str, np.ndarray], cfg: RNetConfig, rgb: ImageTensor,
           depth_in: DepthMap, sigma_d: float = 0.0, rng: Optional[Rng] = None) -> DepthMap:
    """Refine a depth map (see refine_with_cache)."""
    return refine_with_cache(weights, cfg, rgb, depth_in, sigma_d, rng).depth


def refine_backward(weights: dict[str, np.ndarray], cfg: RNetConfig, result: RefineResult,
                    grad_depth: np.ndarray) -> dict[str, np.ndarray]:
    """Chain d(loss)/d(refined depth) through the exp/clamp head into parameter
    gradients. grad_depth entries at invalid pixels are ignored."""
    grad_r = grad_depth * result.depth_raw * result.clamp_mask * result.valid
    grad_pad = np.zeros(result.padded_hw, dtype=result.depth_raw.dtype)
    grad_pad[:grad_r.shape[0], :grad_r.shape[1]] = grad_r
    return backward(weights, cfg, result.cache, grad_pad)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    """AdamW state: first/second moments per parameter plus hyperparameters."""

    lr: float = 3.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_weights(cls, weights: dict[str, np.ndarray], **hyper) -> "OptimState":
        state = cls(**hyper)
        state.m = {k: np.zeros_like(w) for k, w in weights.items()}
        state.v = {k: np.zeros_like(w) for k, w in weights.items()}
        return state


def adamw_step(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimState) -> tuple[dict[str, np.ndarray], OptimState]:
    """One AdamW update, in place: decoupled decay (w -= lr*wd*w) before the
    bias-corrected moment update. Non-finite gradients reject the whole step."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r}: step rejected")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, w in weights.items():
        g = grads[name]
        if state.weight_decay:
            w -= state.lr * state.weight_decay * w
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        w -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return weights, state
