"""Depth evaluation: threshold accuracies, scale-invariant log error, absolute
relative error, RMSE, point-cloud F-score, and the consistency-probe maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import CameraIntrinsics, DepthMap, gaussian_blur_2d
from .geometry import PointCloud, unproject

DELTA_EXPONENTS = (0.25, 0.5, 1.0, 2.0, 3.0)


@dataclass
class MetricsReport:
    delta: dict[str, float]
    si_log: float
    abs_rel: float
    abs_rel_pct: float
    rmse: float
    f_score: float
    valid_pixel_count: int

    def to_dict(self) -> dict:
        return {
            "delta": dict(self.delta),
            "si_log": self.si_log,
            "abs_rel": self.abs_rel,
            "abs_rel_pct": self.abs_rel_pct,
            "rmse": self.rmse,
            "f_score": self.f_score,
            "valid_pixel_count": self.valid_pixel_count,
        }


def _joint_depths(pred: DepthMap, gt: DepthMap) -> tuple[np.ndarray, np.ndarray]:
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError("pred and gt dims differ")
    joint = pred.valid & gt.valid
    if not joint.any():
        raise ValueError("no jointly valid pixels")
    return pred.depth[joint].astype(np.float64), gt.depth[joint].astype(np.float64)


def delta_threshold(pred: DepthMap, gt: DepthMap, t: float) -> float:
    """Fraction of pixels with max(pred/gt, gt/pred) < 1.25^t."""
    p, g = _joint_depths(pred, gt)
    ratio = np.maximum(p / g, g / p)
    return float((ratio < 1.25 ** t).mean())


def si_log(pred: DepthMap, gt: DepthMap) -> float:
    """Standard deviation (population) of per-pixel log-depth residuals."""
    p, g = _joint_depths(pred, gt)
    if p.size < 2:
        raise ValueError("si_log needs >= 2 jointly valid pixels")
    d = np.log(p) - np.log(g)
    return float(np.sqrt(max(np.mean(d * d) - np.mean(d) ** 2, 0.0)))


def abs_rel(pred: DepthMap, gt: DepthMap) -> float:
    p, g = _joint_depths(pred, gt)
    return float(np.mean(np.abs(p - g) / g))


def rmse(pred: DepthMap, gt: DepthMap) -> float:
    p, g = _joint_depths(pred, gt)
    return float(np.sqrt(np.mean((p - g) ** 2)))


# ---------------------------------------------------------------- F-score

def _sq_dists(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """(len(q), len(r)) squared distances, identical arithmetic in both
    nearest-neighbor paths so they agree bitwise."""
    dx = q[:, None, 0] - r[None, :, 0]
    dy = q[:, None, 1] - r[None, :, 1]
    dz = q[:, None, 2] - r[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def _within_exact(query: np.ndarray, ref: np.ndarray, tau: float) -> np.ndarray:
    tau2 = tau * tau
    out = np.zeros(len(query), dtype=bool)
    for lo in range(0, len(query), 256):
        chunk = query[lo:lo + 256]
        out[lo:lo + len(chunk)] = (_sq_dists(chunk, ref) <= tau2).any(axis=1)
    return out


def _within_grid(query: np.ndarray, ref: np.ndarray, tau: float) -> np.ndarray:
    """Spatial hash with cell size tau: any match within tau lies in one of
    the 27 neighboring cells."""
    tau2 = tau * tau
    cells: dict[tuple[int, int, int], list[int]] = {}
    keys = np.floor(ref / tau).astype(np.int64)
    for idx, key in enumerate(map(tuple, keys)):
        cells.setdefault(key, []).append(idx)
    qkeys = np.floor(query / tau).astype(np.int64)
    out = np.zeros(len(query), dtype=bool)
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    for i, (qk, qp) in enumerate(zip(qkeys, query)):
        cand: list[int] = []
        for off in offsets:
            cand.extend(cells.get((qk[0] + off[0], qk[1] + off[1], qk[2] + off[2]), ()))
        if cand:
            out[i] = (_sq_dists(qp[None], ref[cand])[0] <= tau2).any()
    return out


def f_score(pred_pc: PointCloud, gt_pc: PointCloud, tau: float = 0.25,
            method: str = "grid") -> float:
    """Point-cloud F1 at distance threshold tau: precision over predicted
    points, recall over ground-truth points, harmonic mean."""
    if len(pred_pc) == 0 or len(gt_pc) == 0:
        raise ValueError("f_score needs non-empty clouds")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    within = {"grid": _within_grid, "exact": _within_exact}[method]
    precision = float(within(pred_pc.points, gt_pc.points, tau).mean())
    recall = float(within(gt_pc.points, pred_pc.points, tau).mean())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------- probes

@dataclass
class ProbeResult:
    """Per-pixel weighted L1 map, the weight mask used, and the weighted mean."""

    error_map: np.ndarray
    weight: np.ndarray
    mean: float
    pixel_count: int


def pud_probe(a: DepthMap, b: DepthMap, reference: DepthMap,
              edge_sigma: float = 1.0, edge_threshold: float = 0.2) -> ProbeResult:
    """L1 inconsistency between two predictions with edge forgiveness: pixels
    where the Gaussian-blurred reference has gradient magnitude above
    edge_threshold get weight 0, everything else weight 1."""
    if (a.height, a.width) != (b.height, b.width) or (a.height, a.width) != (reference.height, reference.width):
        raise ValueError("probe inputs have different dims")
    blurred = gaussian_blur_2d(reference.depth.astype(np.float64), edge_sigma)
    gy, gx = np.gradient(blurred)
    weight = np.sqrt(gx * gx + gy * gy) <= edge_threshold
    joint = a.valid & b.valid
    err = np.where(joint & weight, np.abs(a.depth.astype(np.float64) - b.depth.astype(np.float64)), 0.0)
    count = int((joint & weight).sum())
    mean = float(err.sum() / count) if count else 0.0
    return ProbeResult(err.astype(np.float32), weight, mean, count)


def subsample_probe(pred_on_crop: DepthMap, crop_of_full_pred: DepthMap) -> ProbeResult:
    """Plain masked L1 map between a refined crop and the crop of the full
    prediction."""
    if (pred_on_crop.height, pred_on_crop.width) != (crop_of_full_pred.height, crop_of_full_pred.width):
        raise ValueError("probe inputs have different dims")
    joint = pred_on_crop.valid & crop_of_full_pred.valid
    if not joint.any():
        raise ValueError("subsample probe has no jointly valid pixels")
    err = np.where(joint, np.abs(pred_on_crop.depth.astype(np.float64) - crop_of_full_pred.depth.astype(np.float64)), 0.0)
    count = int(joint.sum())
    return ProbeResult(err.astype(np.float32), joint, float(err.sum() / count), count)


# ---------------------------------------------------------------- reports

def compute_report(pred: DepthMap, gt: DepthMap, k: Optional[CameraIntrinsics] = None,
                   tau: float = 0.25) -> MetricsReport:
    """Full metric suite for one image; F-score uses un-projected clouds and
    needs intrinsics (reported as nan without them)."""
    deltas = {f"{t:g}": delta_threshold(pred, gt, t) for t in DELTA_EXPONENTS}
    ar = abs_rel(pred, gt)
    fs = float("nan")
    if k is not None:
        fs = f_score(unproject(pred, k), unproject(gt, k), tau)
    joint = int((pred.valid & gt.valid).sum())
    return MetricsReport(
        delta=deltas,
        si_log=si_log(pred, gt),
        abs_rel=ar,
        abs_rel_pct=100.0 * ar,
        rmse=rmse(pred, gt),
        f_score=fs,
        valid_pixel_count=joint,
    )


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    """Plain mean over per-image reports (pixel count summed)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    return MetricsReport(
        delta={key: float(np.mean([r.delta[key] for r in reports])) for key in reports[0].delta},
        si_log=float(np.mean([r.si_log for r in reports])),
        abs_rel=float(np.mean([r.abs_rel for r in reports])),
        abs_rel_pct=float(np.mean([r.abs_rel_pct for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        f_score=float(np.mean([r.f_score for r in reports])),
        valid_pixel_count=int(np.sum([r.valid_pixel_count for r in reports])),
    )


def format_report_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Aligned text table in the standard column order:
    d_0.25, d_0.5, d_1, F_A, SI_log, Abs, RMS."""
    header = ["image", "d_0.25", "d_0.5", "d_1", "F_A", "SI_log", "Abs", "RMS"]
    lines = [header]
    for name, r in rows:
        lines.append([
            name,
            f"{r.delta['0.25']:.3f}", f"{r.delta['0.5']:.3f}", f"{r.delta['1']:.3f}",
            f"{r.f_score:.3f}", f"{r.si_log:.4f}", f"{r.abs_rel_pct:.2f}", f"{r.rmse:.3f}",
        ])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    out = []
    for row in lines:
        out.append("  ".join(s.ljust(w) for s, w in zip(row, widths)).rstrip())
    return "\n".join(out)
