"""Command-line pipeline: refine, train, eval, synth, analyze, unproject.

Exit codes: 0 success, 2 input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import toml

from . import config as config_mod
from . import formats, metrics, rnet, synth, train as train_mod
from .core import DepthMap, ImageTensor, NumericError, Rng, resize_depth
from .formats import FormatError
from .geometry import unproject
from .mrcm import PipelineState, run_iteration

logger = logging.getLogger(__name__)


def _build_config(args) -> config_mod.PipelineConfig:
    cfg = config_mod.preset(args.preset)
    if getattr(args, "config", None):
        cfg = config_mod.load_config(args.config, base=cfg)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "iterations", None) is not None:
        cfg.iterations = args.iterations
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    return cfg


def _load_weights_or_init(path, cfg: config_mod.PipelineConfig) -> dict[str, np.ndarray]:
    if path:
        return train_mod.strip_optimizer(formats.load_weights(path))
    # Fresh weights have a zero head, i.e. the identity refiner.
    return rnet.init_weights(cfg.rnet, Rng(cfg.seed).child(1))


def _save_outputs(depth: DepthMap, prefix: Path) -> None:
    prefix.parent.mkdir(parents=True, exist_ok=True)
    formats.save_depth(depth, prefix.with_suffix(".png"), "millimeter_png16")
    formats.save_depth(depth, prefix.with_suffix(".pfm"), "pfm_meters")


# ---------------------------------------------------------------- refine

def cmd_refine(args) -> int:
    cfg = _build_config(args)
    rgb = formats.load_image_png(args.image)
    depth = formats.load_depth(args.depth, args.depth_unit)
    k = formats.load_intrinsics(args.intrinsics)
    maskset = formats.load_masks(args.masks) if args.masks else None
    weights = _load_weights_or_init(args.weights, cfg)
    rng = Rng(cfg.seed)
    prefix = Path(args.out)

    gt = formats.load_depth(args.gt, args.depth_unit) if args.gt else None
    report_rows = []
    current = depth
    for it in range(args.start_iteration, args.start_iteration + cfg.iterations):
        state = PipelineState(rgb, current, maskset, weights, cfg.rnet, cfg.sampler, cfg.mrcm)
        current = run_iteration(state, rng.child(6, it))
        if args.dump_iters:
            _save_outputs(current, prefix.parent / f"{prefix.name}_iter{it + 1:02d}")
        if gt is not None:
            rep = metrics.compute_report(current, gt, k, cfg.f_tau)
            report_rows.append({"iteration": it + 1, **rep.to_dict()})
            logger.info("iteration %d: si_log %.4f d_0.25 %.3f", it + 1, rep.si_log, rep.delta["0.25"])

    _save_outputs(current, prefix)
    if args.ply:
        formats.save_ply(unproject(current, k, args.scale, rgb), prefix.with_suffix(".ply"))
    if gt is not None:
        with open(prefix.parent / f"{prefix.name}_metrics.jsonl", "w") as f:
            for row in report_rows:
                f.write(json.dumps(row) + "\n")
    return 0


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(args.out)
    weights_path = train_mod.train(args.dataset, cfg, out_dir, resume_from=args.resume)
    config_mod.save_config(cfg, out_dir / "config.toml")
    logger.info("weights written to %s", weights_path)
    return 0


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    preds = {p.stem: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {p.stem: p for p in sorted(gt_dir.glob("*.png"))}
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        raise FormatError(f"unmatched depth files: {', '.join(unmatched)}")
    if not preds:
        raise FormatError(f"no depth PNGs under {pred_dir}")
    k = formats.load_intrinsics(args.intrinsics)
    rows = []
    for stem in sorted(preds):
        rep = metrics.compute_report(
            formats.load_depth(preds[stem]), formats.load_depth(gts[stem]), k, args.tau)
        rows.append((stem, rep))
    mean = metrics.mean_report([rep for _, rep in rows])
    table = metrics.format_report_table(rows + [("mean", mean)])
    print(table)
    if args.out:
        payload = {"images": {name: rep.to_dict() for name, rep in rows}, "mean": mean.to_dict()}
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
    return 0


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    scene_spec = synth.SceneSpec()
    degrade_spec = synth.DegradeSpec()
    if args.spec:
        with open(args.spec) as f:
            data = toml.load(f)
        scene_spec = dataclasses.replace(scene_spec, **{
            key: tuple(val) if isinstance(val, list) else val
            for key, val in data.get("scene", {}).items()})
        if "degrade" in data:
            degrade_spec = dataclasses.replace(degrade_spec, **data["degrade"])
        elif "scene" in data and args.no_degrade:
            degrade_spec = None
    if args.no_degrade:
        degrade_spec = None
    names = synth.generate_dataset(scene_spec, degrade_spec, args.count, args.out, args.seed)
    logger.info("wrote %d scenes to %s", len(names), args.out)
    return 0


# ---------------------------------------------------------------- analyze

def _colorize(err: np.ndarray, vmax: float) -> ImageTensor:
    """Map [0, vmax] to a blue -> green -> red ramp."""
    t = np.clip(err / vmax if vmax > 0 else err, 0.0, 1.0)
    r = np.clip(2.0 * t - 1.0, 0.0, 1.0)
    g = 1.0 - np.abs(2.0 * t - 1.0)
    b = np.clip(1.0 - 2.0 * t, 0.0, 1.0)
    return ImageTensor(np.stack([r, g, b]).astype(np.float32))


def cmd_analyze(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    full_pred = formats.load_depth(args.pred_full, args.depth_unit)
    reference = formats.load_depth(args.reference, args.depth_unit)
    stats: dict = {"pud": {}, "crop": {}}
    for path in args.pud or []:
        branch = formats.load_depth(path, args.depth_unit)
        if (branch.height, branch.width) != (full_pred.height, full_pred.width):
            branch = resize_depth(branch, full_pred.height, full_pred.width)
        probe = metrics.pud_probe(full_pred, branch, reference, args.edge_sigma, args.edge_threshold)
        name = Path(path).stem
        vmax = float(probe.error_map.max())
        formats.save_image_png(_colorize(probe.error_map, vmax), out_dir / f"pud_{name}.png")
        stats["pud"][name] = {"mean": probe.mean, "pixel_count": probe.pixel_count, "vmax": vmax}
    if args.crop_pred:
        if not args.crop_rect:
            raise ValueError("--crop-pred requires --crop-rect X Y W H")
        x, y, w, h = args.crop_rect
        crop_pred = formats.load_depth(args.crop_pred, args.depth_unit)
        target = DepthMap(full_pred.depth[y:y + h, x:x + w].copy(),
                          full_pred.valid[y:y + h, x:x + w].copy())
        probe = metrics.subsample_probe(crop_pred, target)
        name = Path(args.crop_pred).stem
        vmax = float(probe.error_map.max())
        formats.save_image_png(_colorize(probe.error_map, vmax), out_dir / f"crop_{name}.png")
        stats["crop"][name] = {"mean": probe.mean, "pixel_count": probe.pixel_count,
                               "rect": [x, y, w, h], "vmax": vmax}
    with open(out_dir / "stats.json", "w") as f:
        json.dump(stats, f, indent=2)
        f.write("\n")
    print(json.dumps(stats))
    return 0


# ---------------------------------------------------------------- unproject

def cmd_unproject(args) -> int:
    depth = formats.load_depth(args.depth, args.depth_unit)
    k = formats.load_intrinsics(args.intrinsics)
    rgb = formats.load_image_png(args.rgb) if args.rgb else None
    pc = unproject(depth, k, args.scale, rgb)
    formats.save_ply(pc, args.out, binary=not args.ascii)
    logger.info("wrote %d points to %s", len(pc), args.out)
    return 0


# ---------------------------------------------------------------- parser

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config overlaying the preset")
    p.add_argument("--preset", default="desk", choices=["desk", "paper", "paper-cumulative"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="force sequential execution (the default; kept for pipelines)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multidepth",
                                     description="Multi-sample monocular metric depth refinement")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refine", help="iteratively refine a depth map")
    p.add_argument("--image", required=True)
    p.add_argument("--depth", required=True, help="initial depth from the upstream estimator")
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--masks", help="mask directory or indexed PNG")
    p.add_argument("--weights", help="MDPT weights (omitted: identity refiner)")
    p.add_argument("--out", required=True, help="output prefix (.png/.pfm appended)")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--start-iteration", type=int, default=0,
                   help="absolute index of the first iteration (for resumed runs)")
    p.add_argument("--ply", action="store_true", help="also un-project to a PLY cloud")
    p.add_argument("--dump-iters", action="store_true")
    p.add_argument("--scale", type=float, default=1.0, help="un-projection scale")
    p.add_argument("--gt", help="ground truth for per-iteration metrics")
    p.add_argument("--depth-unit", default="millimeter_png16",
                   choices=["millimeter_png16", "pfm_meters"])
    _add_config_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("train", help="train the refinement network")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint.mdpt to resume from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--tau", type=float, default=0.25, help="F-score distance threshold (m)")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="TOML with [scene] and optional [degrade] tables")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-degrade", action="store_true", help="skip init_depth.png")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze", help="consistency-probe error maps")
    p.add_argument("--pred-full", required=True)
    p.add_argument("--reference", required=True, help="reference depth for edge forgiveness")
    p.add_argument("--pud", nargs="*", help="per-branch depth maps (upscaled if below full res)")
    p.add_argument("--crop-pred")
    p.add_argument("--crop-rect", nargs=4, type=int, metavar=("X", "Y", "W", "H"))
    p.add_argument("--edge-sigma", type=float, default=1.0)
    p.add_argument("--edge-threshold", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.add_argument("--depth-unit", default="millimeter_png16",
                   choices=["millimeter_png16", "pfm_meters"])
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("unproject", help="depth map to PLY point cloud")
    p.add_argument("--depth", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--rgb", help="color source")
    p.add_argument("--ascii", action="store_true")
    p.add_argument("--depth-unit", default="millimeter_png16",
                   choices=["millimeter_png16", "pfm_meters"])
    p.set_defaults(func=cmd_unproject)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        logger.error("numeric failure: %s", e)
        return 3
    except (FormatError, FileNotFoundError, NotADirectoryError, OSError, ValueError,
            KeyError, json.JSONDecodeError, toml.TomlDecodeError) as e:
        logger.error("input error: %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
