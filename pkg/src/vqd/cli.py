"""Command-line entry point binding all modules.

Every subcommand is a pure function of (config, input files) to (output
files, run log). Exit codes: 0 success, 2 usage error, 1 anything else with
a one-line machine-parsable message on stderr.
"""

from __future__ import annotations

import argparse
import importlib.util
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import cv2
import numpy as np

from . import data as data_mod
from .checkpoint import load_checkpoint, require_stage, save_checkpoint
from .config import load_run_config, preset_config
from .data import (
    BicubicEnhancer,
    ClipEntry,
    ClipManifest,
    ClipDataset,
    FrameDataset,
    UnsharpEnhancer,
    hr_sr_enhance,
    make_synthetic_anime_set,
    scan_clip_directory,
    scene_filter,
)
from .degrade import degrade_clip, vq_degrade_at_level
from .errors import ConfigError, VQDError
from .imgio import read_png, write_png
from .metrics import BUILTIN_SCORERS, nr_iqa_protocol, psnr, ssim, write_report
from .rng import derive_rng
from .train_vqgan import model_from_checkpoint, train_stage1, train_stage2
from .train_vsr import train_vsr, vsr_from_checkpoint
from .vsr import sr_clip

SUBCOMMANDS = (
    "ingest",
    "synth-data",
    "enhance-hr",
    "train-degradation",
    "degrade",
    "train-vsr",
    "upscale",
    "eval",
    "preview-k",
)


def num_workers() -> int:
    raw = os.environ.get("VQD_NUM_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"VQD_NUM_WORKERS must be an integer, got {raw!r}")


def _load_config(args) -> "RunConfig":
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return preset_config(getattr(args, "preset", None) or "tiny")


# ------------------------------------------------------------- subcommands


def cmd_ingest(args) -> int:
    manifest = scan_clip_directory(args.infile, role=args.role)
    if args.scene_threshold is not None:
        filtered = ClipManifest(base_dir=os.path.abspath(args.out_dir or "."))
        out_dir = args.out_dir or (args.infile.rstrip("/") + "_filtered")
        for clip in manifest.clips:
            arr = manifest.load_clip(clip)
            kept = scene_filter(arr, args.scene_threshold)
            rels = []
            for i in range(kept.shape[0]):
                rel = os.path.join(clip.id, f"{i:05d}.png")
                write_png(os.path.join(out_dir, rel), kept[i])
                rels.append(rel)
            filtered.clips.append(
                ClipEntry(clip.id, clip.role, rels, clip.width, clip.height)
            )
            filtered.base_dir = os.path.abspath(out_dir)
        manifest = filtered
    manifest.validate()
    manifest.to_json(args.out)
    print(f"wrote manifest with {len(manifest.clips)} clips to {args.out}")
    return 0


def cmd_synth_data(args) -> int:
    cfg = _load_config(args)
    rng = derive_rng(cfg.seed, "synth-data")
    manifest = make_synthetic_anime_set(
        args.n, args.size, rng, out_dir=args.out, frames_per_clip=args.frames
    )
    if args.test_n:
        test = make_synthetic_anime_set(
            args.test_n,
            args.size,
            derive_rng(cfg.seed, "synth-data-test"),
            out_dir=os.path.join(args.out, "test"),
            frames_per_clip=args.frames,
            role="test",
        )
        for clip in test.clips:
            clip.id = "test_" + clip.id
            clip.frames = [os.path.join("test", f) for f in clip.frames]
            manifest.clips.append(clip)
    path = os.path.join(args.out, "manifest.json")
    manifest.to_json(path)
    manifest.base_dir = os.path.abspath(args.out)
    manifest.validate()
    print(f"wrote {len(manifest.clips)} synthetic clips under {args.out}")
    return 0


def _build_enhancer(spec: str):
    name, _, scale = spec.partition(":")
    scale = int(scale) if scale else 4
    if name == "bicubic":
        return BicubicEnhancer(scale)
    if name == "unsharp":
        return UnsharpEnhancer(scale)
    raise ConfigError(f"unknown enhancer {name!r} (expected bicubic or unsharp)")


def cmd_enhance_hr(args) -> int:
    manifest = ClipManifest.from_json(args.infile).validate()
    enhancer = _build_enhancer(args.enhancer)
    out = ClipManifest(base_dir=os.path.abspath(args.out))
    for clip in manifest.clips:
        arr = manifest.load_clip(clip)
        rels = []
        for i in range(arr.shape[0]):
            rel = os.path.join(clip.id, f"{i:05d}.png")
            write_png(os.path.join(args.out, rel), hr_sr_enhance(arr[i], enhancer))
            rels.append(rel)
        out.clips.append(ClipEntry(clip.id, clip.role, rels, clip.width, clip.height))
    out.to_json(os.path.join(args.out, "manifest.json"))
    print(f"enhanced {len(out.clips)} clips into {args.out}")
    return 0


def cmd_train_degradation(args) -> int:
    cfg = _load_config(args)
    manifest = ClipManifest.from_json(args.data).validate()
    dataset = FrameDataset.from_manifest(manifest, role="hr-train")
    log_path = args.out + ".log.jsonl"
    if args.stage == 1:
        ckpt, _ = train_stage1(
            dataset,
            cfg.msvqgan,
            seed=cfg.seed,
            steps=args.steps,
            out_path=args.out,
            log_path=log_path,
        )
    else:
        src = args.stage1_ckpt
        if not src:
            raise ConfigError("--stage 2 requires --stage1-ckpt")
        stage1 = require_stage(load_checkpoint(src), "stage1")
        ckpt, _ = train_stage2(
            stage1,
            dataset,
            cfg.msvqgan,
            seed=cfg.seed,
            steps=args.steps,
            out_path=args.out,
            log_path=log_path,
        )
    print(f"stage-{args.stage} degradation checkpoint at step {ckpt.step}: {args.out}")
    return 0


def cmd_degrade(args) -> int:
    cfg = _load_config(args)
    manifest = ClipManifest.from_json(args.infile).validate()
    model = model_from_checkpoint(require_stage(load_checkpoint(args.model), "stage2"))
    out = ClipManifest(base_dir=os.path.abspath(args.out))

    def run_one(clip):
        arr = manifest.load_clip(clip)
        rng = derive_rng(cfg.seed, "degrade", clip.id)
        lr = degrade_clip(arr, cfg.degradation, model, rng)
        rels = []
        for i in range(lr.shape[0]):
            rel = os.path.join(clip.id, f"{i:05d}.png")
            write_png(os.path.join(args.out, rel), lr[i])
            rels.append(rel)
        return ClipEntry(
            clip.id, "lq-train", rels, lr.shape[2], lr.shape[1]
        )

    workers = num_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(run_one, manifest.clips))
    else:
        entries = [run_one(c) for c in manifest.clips]
    out.clips = entries
    out.to_json(os.path.join(args.out, "manifest.json"))
    print(f"degraded {len(entries)} clips into {args.out}")
    return 0


def cmd_train_vsr(args) -> int:
    cfg = _load_config(args)
    manifest = ClipManifest.from_json(args.data).validate()
    dataset = ClipDataset.from_manifest(manifest, role="hr-train")
    log_path = args.out + ".log.jsonl"
    deg_model = None
    stage1_ckpt = None
    if args.stage == 2:
        if not args.degradation_model:
            raise ConfigError("--stage 2 requires --degradation-model")
        if not args.stage1_ckpt:
            raise ConfigError("--stage 2 requires --stage1-ckpt")
        deg_model = model_from_checkpoint(
            require_stage(load_checkpoint(args.degradation_model), "stage2")
        )
        stage1_ckpt = require_stage(load_checkpoint(args.stage1_ckpt), "stage1")
    enhancer = BicubicEnhancer(4) if cfg.vsr.use_enhanced_gt else None
    ckpt, _ = train_vsr(
        args.stage,
        dataset,
        cfg.degradation,
        cfg.vsr,
        seed=cfg.seed,
        degradation_model=deg_model,
        stage1_ckpt=stage1_ckpt,
        enhancer=enhancer,
        steps=args.steps,
        out_path=args.out,
        log_path=log_path,
    )
    print(f"stage-{args.stage} VSR checkpoint at step {ckpt.step}: {args.out}")
    return 0


def cmd_upscale(args) -> int:
    model = vsr_from_checkpoint(load_checkpoint(args.model))
    names = sorted(f for f in os.listdir(args.infile) if f.lower().endswith(".png"))
    if not names:
        raise VQDError(f"no PNG frames in {args.infile}")
    clip = np.stack([read_png(os.path.join(args.infile, f)) for f in names], axis=0)
    out = sr_clip(clip, model)
    for name, frame in zip(names, out):
        write_png(os.path.join(args.out, name), frame)
    print(f"upscaled {len(names)} frames into {args.out}")
    return 0


def _load_scorer(spec: str):
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in BUILTIN_SCORERS:
            raise ConfigError(
                f"unknown builtin scorer {name!r}; available: {sorted(BUILTIN_SCORERS)}"
            )
        return BUILTIN_SCORERS[name]
    if not os.path.isfile(spec):
        raise ConfigError(f"scorer plugin not found: {spec}")
    module_spec = importlib.util.spec_from_file_location("vqd_scorer_plugin", spec)
    module = importlib.util.module_from_spec(module_spec)
    module_spec.loader.exec_module(module)
    if not hasattr(module, "score"):
        raise ConfigError(f"scorer plugin {spec} must define a score(crop) function")
    return module.score


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    manifest = ClipManifest.from_json(args.manifest).validate()
    rows = []
    if args.metric in ("psnr", "ssim"):
        if not args.ref_manifest:
            raise ConfigError(f"--metric {args.metric} requires --ref-manifest")
        ref = ClipManifest.from_json(args.ref_manifest).validate()
        ref_by_id = {c.id: c for c in ref.clips}
        fn = psnr if args.metric == "psnr" else ssim
        for clip in manifest.clips:
            if clip.id not in ref_by_id:
                raise VQDError(f"clip {clip.id} missing from reference manifest")
            a = manifest.load_clip(clip)
            b = ref.load_clip(ref_by_id[clip.id])
            if a.shape != b.shape:
                raise VQDError(
                    f"clip {clip.id}: result {a.shape} vs reference {b.shape}"
                )
            value = float(np.mean([fn(a[i], b[i]) for i in range(a.shape[0])]))
            rows.append((clip.id, args.metric, value))
    elif args.metric == "nriqa":
        scorer = _load_scorer(args.scorer)
        for clip in manifest.clips:
            arr = manifest.load_clip(clip)
            value = nr_iqa_protocol(arr, scorer, cfg.eval)
            rows.append((clip.id, "nriqa", value))
    else:
        raise ConfigError(f"unknown metric {args.metric!r}")
    write_report(rows, args.report)
    print(f"wrote {len(rows)} clip rows (+mean) to {args.report}")
    return 0


def preview_k(frame: np.ndarray, model, k_list, cols: int = 6) -> np.ndarray:
    """Row-major grid of degradation transfers at each requested level."""
    if not k_list:
        raise VQDError("k_list must contain at least one level")
    cells = []
    for k in k_list:
        out = vq_degrade_at_level(frame, model, int(k))
        cells.append(_labeled_cell(out, f"k={int(k)}"))
    cols = max(1, min(cols, len(cells)))
    rows = math.ceil(len(cells) / cols)
    ch, cw = cells[0].shape[:2]
    grid = np.zeros((rows * ch, cols * cw, 3), dtype=np.float32)
    for i, cell in enumerate(cells):
        r, c = divmod(i, cols)
        grid[r * ch : (r + 1) * ch, c * cw : (c + 1) * cw] = cell
    return grid


def _labeled_cell(frame: np.ndarray, label: str) -> np.ndarray:
    strip = np.zeros((16, frame.shape[1], 3), dtype=np.float32)
    cv2.putText(strip, label, (2, 12), cv2.FONT_HERSHEY_SIMPLEX, 0.35, (1.0, 1.0, 1.0), 1)
    return np.concatenate([strip, frame], axis=0)


def cmd_preview_k(args) -> int:
    model = model_from_checkpoint(require_stage(load_checkpoint(args.model), "stage2"))
    frame = read_png(args.frame)
    if args.k_list:
        k_list = [int(tok) for tok in args.k_list.split(",") if tok.strip()]
    else:
        start, stop, step = args.k_range
        k_list = list(range(start, stop + 1, step))
    grid = preview_k(frame, model, k_list, cols=args.cols)
    write_png(args.out, grid)
    print(f"wrote {len(k_list)}-cell preview grid to {args.out}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqd",
        description="Degradation modeling and recurrent upscaling for animation clips.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="run config JSON file")
        p.add_argument("--preset", choices=("tiny", "paper-scale"), help="built-in preset")

    p = sub.add_parser("ingest", help="build a manifest from clip directories")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--role", default="hr-train")
    p.add_argument("--scene-threshold", type=float, default=None)
    p.add_argument("--out-dir", default=None, help="directory for filtered frames")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth-data", help="generate synthetic cartoon-style clips")
    add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--test-n", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("enhance-hr", help="super-resolve then downsample ground truths")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--enhancer", default="bicubic:4")
    p.set_defaults(func=cmd_enhance_hr)

    p = sub.add_parser("train-degradation", help="train the codebook degradation model")
    add_config_args(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage1-ckpt")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train_degradation)

    p = sub.add_parser("degrade", help="synthesize LR clips from HR clips")
    add_config_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train-vsr", help="train the recurrent upscaler")
    add_config_args(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage1-ckpt")
    p.add_argument("--degradation-model")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train_vsr)

    p = sub.add_parser("upscale", help="upscale a directory of PNG frames")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("eval", help="paired or no-reference evaluation")
    add_config_args(p)
    p.add_argument("--metric", choices=("psnr", "ssim", "nriqa"), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ref-manifest")
    p.add_argument("--scorer", default="builtin:gradient")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("preview-k", help="grid of degradation levels for one frame")
    p.add_argument("--model", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-list", default=None, help="comma-separated levels")
    p.add_argument(
        "--k-range", type=int, nargs=3, default=(1, 70, 3), metavar=("START", "STOP", "STEP")
    )
    p.add_argument("--cols", type=int, default=6)
    p.set_defaults(func=cmd_preview_k)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except VQDError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: FileNotFoundError: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
