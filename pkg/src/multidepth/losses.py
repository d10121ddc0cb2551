"""Training objectives: variance-reweighted MSE in spherical coordinates,
Huber distance, and the three sample-consistency losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import CameraIntrinsics, DepthMap, ImageTensor, NumericError
from .geometry import to_spherical
from .sampling import Sample, pixel_unshuffle, pixel_unshuffle_depth, pud_crop_origin

logger = logging.getLogger(__name__)

# A refiner maps (rgb, depth) -> refined depth; consistency losses are
# evaluated with depth noise disabled so both sides see the same inputs.
RefineFn = Callable[[ImageTensor, DepthMap], DepthMap]


@dataclass
class LossWeights:
    lam: tuple[float, float, float] = (1.0, 1.0, 1.0)            # theta, phi, z
    lam_sample: tuple[float, float, float] = (1.0, 1.0, 1.0)     # pud, sub, sam
    w_sample: float = 1.0
    huber_delta: float = 1.0

    def __post_init__(self):
        if min(self.lam) < 0 or min(self.lam_sample) < 0 or self.w_sample < 0:
            raise ValueError("loss weights must be >= 0")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be > 0")


@dataclass
class SphericalError:
    """Per-pixel spherical residuals (theta, phi, z) over jointly valid pixels."""

    eps: np.ndarray        # (3, N) float64
    joint: np.ndarray      # (H, W) bool


def spherical_error(pred: DepthMap, gt: DepthMap, k: CameraIntrinsics,
                    z_mode: str = "log") -> SphericalError:
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError("pred and gt dims differ")
    joint = pred.valid & gt.valid
    sp = to_spherical(pred, k, z_mode)
    sg = to_spherical(gt, k, z_mode)
    return SphericalError((sp - sg)[:, joint], joint)


def lambda_mse(pred: DepthMap, gt: DepthMap, k: CameraIntrinsics,
               lam: tuple[float, float, float] = (1.0, 1.0, 1.0),
               z_mode: str = "log") -> float:
    """||V[eps]||_1 + lam . (E[eps] o E[eps]) over jointly valid pixels.

    Population (1/N) moments, so lam = (1,1,1) reduces to the plain
    per-component MSE sum.
    """
    err = spherical_error(pred, gt, k, z_mode)
    n = err.eps.shape[1]
    if n < 2:
        raise ValueError(f"lambda_mse needs >= 2 jointly valid pixels, got {n}")
    var = err.eps.var(axis=1)
    mean = err.eps.mean(axis=1)
    return float(var.sum() + (np.asarray(lam) * mean ** 2).sum())


def lambda_mse_with_grad(pred: np.ndarray, pred_valid: np.ndarray, gt: DepthMap,
                         k: CameraIntrinsics, lam: tuple[float, float, float],
                         z_mode: str = "log") -> tuple[float, np.ndarray]:
    """lambda_mse on a raw prediction array plus d(loss)/d(pred).

    Only the z component depends on the prediction (theta/phi are fixed by
    the pixel grid), so the gradient flows through z = ln(pred) or pred.
    """
    joint = pred_valid & gt.valid
    n = int(joint.sum())
    if n < 2:
        raise ValueError(f"lambda_mse needs >= 2 jointly valid pixels, got {n}")
    p = pred[joint].astype(np.float64)
    g = gt.depth[joint].astype(np.float64)
    if z_mode == "log":
        eps_z = np.log(p) - np.log(g)
    elif z_mode == "linear":
        eps_z = p - g
    else:
        raise ValueError(f"unknown z_mode {z_mode!r}")
    mz = eps_z.mean()
    loss = float(eps_z.var() + lam[2] * mz * mz)
    # d/d eps_i of Var + lam*mean^2 = 2(eps_i - m)/N + 2*lam*m/N
    deps = (2.0 / n) * (eps_z - mz) + (2.0 * lam[2] / n) * mz
    dpred = deps / p if z_mode == "log" else deps
    grad = np.zeros(pred.shape, dtype=np.float64)
    grad[joint] = dpred
    return loss, grad.astype(pred.dtype)


def huber(a: np.ndarray, b: np.ndarray, delta: float,
          mask: Optional[np.ndarray] = None) -> float:
    """Mean Huber distance: r^2/2 for |r| <= delta, else delta*(|r| - delta/2)."""
    loss, _ = huber_with_grad(a, b, delta, mask)
    return loss


def huber_with_grad(a: np.ndarray, b: np.ndarray, delta: float,
                    mask: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]:
    """Huber loss plus d(loss)/da (d/db is its negation)."""
    if a.shape != b.shape:
        raise ValueError("huber operands have different shapes")
    if delta <= 0:
        raise ValueError("huber delta must be > 0")
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("huber: no jointly valid pixels")
    r = a[mask].astype(np.float64) - b[mask].astype(np.float64)
    absr = np.abs(r)
    quad = absr <= delta
    vals = np.where(quad, 0.5 * r * r, delta * (absr - 0.5 * delta))
    dr = np.where(quad, r, delta * np.sign(r)) / n
    grad = np.zeros(a.shape, dtype=np.float64)
    grad[mask] = dr
    return float(vals.mean()), grad.astype(a.dtype)


def pud_consistency(refine_fn: RefineFn, rgb: ImageTensor, depth: DepthMap,
                    s: int, delta: float = 1.0) -> float:
    """Mean over the s^2 pixel-unshuffle branches of the Huber distance between
    each refined sub-image and the matching stride-s subsample of the refined
    full image. s = 1 compares the full prediction with itself (0)."""
    full_pred = refine_fn(rgb, depth)
    y0, x0, ch, cw = pud_crop_origin(depth.height, depth.width, s)
    rgb_subs = pixel_unshuffle(rgb, s)
    depth_subs = pixel_unshuffle_depth(depth, s)
    terms = []
    for i, (rs, ds) in enumerate(zip(rgb_subs, depth_subs)):
        if not ds.valid.any():
            continue
        pred = refine_fn(rs, ds)
        ys = slice(y0 + i // s, y0 + ch, s)
        xs = slice(x0 + i % s, x0 + cw, s)
        target = full_pred.depth[ys, xs]
        joint = pred.valid & full_pred.valid[ys, xs]
        if not joint.any():
            continue
        terms.append(huber(pred.depth, target, delta, joint))
    return float(np.mean(terms)) if terms else 0.0


def sub_consistency(refine_fn: RefineFn, samples: list[Sample], full_pred: DepthMap,
                    delta: float = 1.0) -> float:
    """Mean over crops of the Huber distance between the refined crop and the
    same rect cut from the refined full image."""
    terms = []
    for sample in samples:
        if sample.kind != "crop":
            raise ValueError(f"expected crop samples, got {sample.kind!r}")
        if not sample.depth.valid.any():
            continue
        x, y, w, h = sample.rect
        pred = refine_fn(sample.rgb, sample.depth)
        target = full_pred.depth[y:y + h, x:x + w]
        joint = pred.valid & full_pred.valid[y:y + h, x:x + w]
        if not joint.any():
            continue
        terms.append(huber(pred.depth, target, delta, joint))
    if not terms:
        logger.warning("sub_consistency: no usable crop samples")
        return 0.0
    return float(np.mean(terms))


def seg_consistency(refine_fn: RefineFn, samples: list[Sample], full_pred: DepthMap,
                    delta: float = 1.0) -> float:
    """Mean over segmentation samples of the masked Huber distance between the
    refined masked view and the mask cut of the refined full image. Masks with
    no valid depth are skipped."""
    terms = []
    for sample in samples:
        if sample.kind != "seg":
            raise ValueError(f"expected seg samples, got {sample.kind!r}")
        if not sample.depth.valid.any():
            continue
        pred = refine_fn(sample.rgb, sample.depth)
        joint = pred.valid & full_pred.valid & sample.coverage
        if not joint.any():
            continue
        terms.append(huber(pred.depth, full_pred.depth, delta, joint))
    return float(np.mean(terms)) if terms else 0.0


def total_loss(components: dict[str, float], weights: LossWeights) -> tuple[float, dict[str, float]]:
    """L = L_lambda_mse + w_sample * (lam_pud*L_pud + lam_sub*L_sub + lam_sam*L_sam).

    Returns the total and a per-term breakdown for logging.
    """
    for name, value in components.items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss component {name!r}: {value}")
    lp, ls, lm = weights.lam_sample
    sample_term = (lp * components.get("pud", 0.0)
                   + ls * components.get("sub", 0.0)
                   + lm * components.get("sam", 0.0))
    total = components.get("lambda_mse", 0.0) + weights.w_sample * sample_term
    breakdown = dict(components)
    breakdown["sample"] = sample_term
    breakdown["total"] = total
    return total, breakdown
