"""Training: the full objective (spherical lambda-MSE + weighted sample
consistency) with analytic gradients, and the staged epoch loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import formats, rnet
from .config import PipelineConfig
from .core import CameraIntrinsics, DepthMap, ImageTensor, NumericError, Rng
from .formats import MaskSet
from .losses import LossWeights, huber_with_grad, lambda_mse_with_grad, total_loss
from .mrcm import MrcmConfig, PipelineState, run_iteration
from .sampling import SamplerConfig, build_sample_batch
from .synth import Scene, load_scene

logger = logging.getLogger(__name__)


@dataclass
class ObjectiveResult:
    total: float
    breakdown: dict[str, float]
    grads: Optional[dict[str, np.ndarray]]


def _accumulate(acc: Optional[dict[str, np.ndarray]], grads: dict[str, np.ndarray]):
    if acc is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        acc[k] += v
    return acc


def compute_objective(weights: dict[str, np.ndarray], rnet_cfg: rnet.RNetConfig,
                      sampler_cfg: SamplerConfig, loss_w: LossWeights,
                      rgb: ImageTensor, input_depth: DepthMap, gt: DepthMap,
                      k: CameraIntrinsics, maskset: Optional[MaskSet], rng: Rng,
                      want_grads: bool = True, z_mode: str = "log",
                      batch=None) -> ObjectiveResult:
    """One image's loss L = L_lambdaMSE + w_sample * (weighted consistency terms),
    with exact parameter gradients when requested.

    The lambda-MSE pass uses depth noise (sigma_d); the consistency target and
    all sample passes run noise-free so the losses measure sampling
    consistency only. All random draws are keyed off `rng` children, so the
    objective is a deterministic function of the weights given one rng; a
    prebuilt sample batch may be passed to pin the samples explicitly.
    """
    sigma = rnet_cfg.depth_noise_sigma
    clean = rnet.refine_with_cache(weights, rnet_cfg, rgb, input_depth, 0.0)
    if sigma > 0:
        noisy = rnet.refine_with_cache(weights, rnet_cfg, rgb, input_depth, sigma, rng.child(0))
    else:
        noisy = clean
    l_mse, g_mse = lambda_mse_with_grad(noisy.depth_raw, noisy.valid, gt, k, loss_w.lam, z_mode)

    if batch is None:
        batch = build_sample_batch(rgb, input_depth, maskset, sampler_cfg, rng.child(1))
    # Per-sample full-res target region and joint mask; validity is known
    # before refining because refine preserves the validity mask exactly.
    jobs = []
    for sample in batch[1:]:
        if not sample.depth.valid.any():
            continue
        if sample.kind == "pud":
            s, (y0, x0) = sample.pud_scale, sample.pud_origin
            i = sample.pud_index
            region = (slice(y0 + i // s, y0 + i // s + s * sample.depth.height, s),
                      slice(x0 + i % s, x0 + i % s + s * sample.depth.width, s))
        elif sample.kind == "crop":
            x, y, cw, ch = sample.rect
            region = (slice(y, y + ch), slice(x, x + cw))
        else:
            region = (slice(None), slice(None))
        joint = sample.depth.valid & clean.valid[region]
        if sample.kind == "seg":
            joint &= sample.coverage
        if joint.any():
            jobs.append((sample, region, joint))

    counts = {kind: sum(1 for s, _, _ in jobs if s.kind == kind) for kind in ("pud", "crop", "seg")}
    lam_by_kind = dict(zip(("pud", "crop", "seg"), loss_w.lam_sample))
    terms = {"pud": 0.0, "crop": 0.0, "seg": 0.0}
    grads = None
    grad_clean = np.zeros_like(clean.depth_raw)
    for sample, region, joint in jobs:
        res = rnet.refine_with_cache(weights, rnet_cfg, sample.rgb, sample.depth, 0.0)
        l, g_a = huber_with_grad(res.depth_raw, clean.depth_raw[region], loss_w.huber_delta, joint)
        terms[sample.kind] += l / counts[sample.kind]
        if want_grads:
            scale = loss_w.w_sample * lam_by_kind[sample.kind] / counts[sample.kind]
            if scale != 0.0:
                grads = _accumulate(grads, rnet.refine_backward(weights, rnet_cfg, res, g_a * scale))
                grad_clean[region] -= g_a * scale

    components = {"lambda_mse": l_mse, "pud": terms["pud"], "sub": terms["crop"], "sam": terms["seg"]}
    total, breakdown = total_loss(components, loss_w)
    if want_grads:
        if noisy is clean:
            grad_clean += g_mse
        else:
            grads = _accumulate(grads, rnet.refine_backward(weights, rnet_cfg, noisy, g_mse))
        grads = _accumulate(grads, rnet.refine_backward(weights, rnet_cfg, clean, grad_clean))
    return ObjectiveResult(total, breakdown, grads)


# ---------------------------------------------------------------- dataset

@dataclass
class TrainScene:
    name: str
    rgb: ImageTensor
    gt: DepthMap
    init_depth: DepthMap
    intrinsics: CameraIntrinsics
    maskset: MaskSet


def load_dataset(dirpath) -> list[TrainScene]:
    """Load every scene_* directory (rgb.png, depth.png, init_depth.png,
    intrinsics.json, masks/)."""
    dirpath = Path(dirpath)
    dirs = sorted(p for p in dirpath.iterdir() if p.is_dir() and (p / "rgb.png").exists())
    if not dirs:
        raise FileNotFoundError(f"no scene directories under {dirpath}")
    scenes = []
    for p in dirs:
        scene = load_scene(p)
        if scene.init_depth is None:
            raise FileNotFoundError(f"{p} has no init_depth.png (run synth with a degrade spec)")
        scenes.append(TrainScene(p.name, scene.rgb, scene.depth, scene.init_depth,
                                 scene.intrinsics, scene.maskset))
    return scenes


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, weights: dict[str, np.ndarray], state: rnet.OptimState,
                    stage: int, epoch: int) -> None:
    table = dict(weights)
    for name, m in state.m.items():
        table[f"opt.m.{name}"] = m
    for name, v in state.v.items():
        table[f"opt.v.{name}"] = v
    table["meta.counters"] = np.array([state.step, stage, epoch], dtype=np.float32)
    formats.save_weights(table, path)


def load_checkpoint(path, optim_cfg) -> tuple[dict[str, np.ndarray], rnet.OptimState, int, int]:
    table = formats.load_weights(path)
    counters = table.pop("meta.counters")
    weights = {k: v for k, v in table.items() if not k.startswith("opt.")}
    state = rnet.OptimState(lr=optim_cfg.lr, beta1=optim_cfg.beta1, beta2=optim_cfg.beta2,
                            weight_decay=optim_cfg.weight_decay, eps=optim_cfg.eps,
                            step=int(counters[0]))
    state.m = {k: table[f"opt.m.{k}"] for k in weights}
    state.v = {k: table[f"opt.v.{k}"] for k in weights}
    return weights, state, int(counters[1]), int(counters[2])


def strip_optimizer(table: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v for k, v in table.items() if not k.startswith(("opt.", "meta."))}


# ---------------------------------------------------------------- loop

def train(dataset_dir, cfg: PipelineConfig, out_dir, resume_from=None) -> Path:
    """Staged training over a scene dataset; writes weights.mdpt, periodic
    checkpoint.mdpt, and a JSON-lines log with per-term losses per epoch.

    Stage feedback_iterations = n > 0 runs n-1 no-gradient MRCM cycles from
    the ingested depth and trains the n-th refinement pass on the result.
    Randomness is keyed by (seed, stage, epoch, scene), so resuming from an
    epoch-boundary checkpoint is bit-exact.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = load_dataset(dataset_dir)
    rng = Rng(cfg.seed)
    if resume_from is not None:
        weights, state, start_stage, start_epoch = load_checkpoint(resume_from, cfg.optim)
    else:
        weights = rnet.init_weights(cfg.rnet, rng.child(1))
        state = rnet.OptimState.for_weights(
            weights, lr=cfg.optim.lr, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2,
            weight_decay=cfg.optim.weight_decay, eps=cfg.optim.eps)
        start_stage, start_epoch = 0, 0

    log_path = out_dir / "train_log.jsonl"
    ckpt_path = out_dir / "checkpoint.mdpt"
    weights_path = out_dir / "weights.mdpt"
    with open(log_path, "a") as log:
        for si, stage in enumerate(cfg.schedule):
            if si < start_stage:
                continue
            state.lr = stage.lr if stage.lr > 0 else cfg.optim.lr
            first_epoch = start_epoch if si == start_stage else 0
            for epoch in range(first_epoch, stage.epochs):
                erng = rng.child(2, si, epoch)
                order = np.argsort(erng.uniform(size=len(scenes)), kind="stable")
                sums: dict[str, float] = {}
                batch_grads = None
                batch_n = 0
                for pos, scene_idx in enumerate(order):
                    scene = scenes[int(scene_idx)]
                    srng = rng.child(3, si, epoch, int(scene_idx))
                    input_depth = scene.init_depth
                    for it in range(max(0, stage.feedback_iterations - 1)):
                        pstate = PipelineState(scene.rgb, input_depth, scene.maskset, weights,
                                               cfg.rnet, cfg.sampler, cfg.mrcm)
                        input_depth = run_iteration(pstate, srng.child(4, it))
                    result = compute_objective(
                        weights, cfg.rnet, cfg.sampler, cfg.loss, scene.rgb, input_depth,
                        scene.gt, scene.intrinsics, scene.maskset, srng.child(5),
                        want_grads=True, z_mode=cfg.z_mode)
                    if not np.isfinite(result.total):
                        raise NumericError(
                            f"non-finite loss at stage {si} epoch {epoch} scene {scene.name}; "
                            f"last checkpoint kept at {ckpt_path}")
                    for key, val in result.breakdown.items():
                        sums[key] = sums.get(key, 0.0) + val
                    batch_grads = _accumulate(batch_grads, result.grads)
                    batch_n += 1
                    if batch_n == cfg.optim.batch_size or pos == len(order) - 1:
                        for g in batch_grads.values():
                            g /= batch_n
                        adamw = rnet.adamw_step(weights, batch_grads, state)
                        weights, state = adamw
                        batch_grads, batch_n = None, 0
                entry = {
                    "stage": si, "epoch": epoch, "lr": state.lr, "step": state.step,
                    "loss": {key: val / len(scenes) for key, val in sums.items()},
                }
                log.write(json.dumps(entry) + "\n")
                log.flush()
                logger.info("stage %d epoch %d total %.6f", si, epoch,
                            entry["loss"].get("total", float("nan")))
                done_epoch = epoch + 1
                if done_epoch % cfg.checkpoint_every == 0 or done_epoch == stage.epochs:
                    next_stage, next_epoch = (si, done_epoch) if done_epoch < stage.epochs else (si + 1, 0)
                    save_checkpoint(ckpt_path, weights, state, next_stage, next_epoch)
    formats.save_weights(weights, weights_path)
    return weights_path
