"""``mbdetr`` command line: simulate, split, train, infer, evaluate, render.

Every command takes the pipeline config from ``--config`` (or the
``MBDETR_CONFIG`` environment variable, or built-in defaults), applies
command-line overrides on top (flags win), writes the effective config to
its output directory, appends JSON-lines events to ``events.jsonl`` there and
prints a short human summary to standard error.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError
from .config import ConfigError, PipelineConfig, load_config
from .dataset import SplitManifest, export_coco, split_by_correlation, verify_split
from .evaluation import EvalConfig, evaluate
from .io import atomic_write_text
from .postprocess import read_detections, write_detections
from .renderer import export_image, render_sequence, save_raw
from .simulator import read_ground_truth, read_sequence, simulate_sequence, write_sequence

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CONFIG_ECHO = "config.json"
EVENTS = "events.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _override(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config (default: $MBDETR_CONFIG or built-in defaults)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="cap on worker threads")
    common.add_argument("--set", dest="overrides", type=_override, action="append", default=[],
                        metavar="KEY=VALUE", help="override any config value by dotted key, e.g. train.lr=1e-3")
    common.add_argument("--out", required=True, help="output directory")

    p = _Parser(prog="mbdetr", description="Microbubble localization with a deformable detection transformer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="synthesize frames with ground truth")
    s.add_argument("--n-frames", type=int)
    s.add_argument("--previews", action="store_true", default=None, help="also write PNG previews")

    s = sub.add_parser("split", parents=[common], help="correlation-aware train/test split")
    s.add_argument("--data", required=True, help="simulated data directory")
    s.add_argument("--test-size", type=int)
    s.add_argument("--threshold", type=float)

    s = sub.add_parser("train", parents=[common], help="train the detector from scratch")
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", required=True, help="split manifest from the split command")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", action="store_true", help="continue from OUT/model.ckpt if present")

    s = sub.add_parser("infer", parents=[common], help="detect bubbles in frames")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", help="restrict to the manifest's test frames")
    s.add_argument("--threshold", type=float)

    s = sub.add_parser("evaluate", parents=[common], help="score detections against ground truth")
    s.add_argument("--detections", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", help="restrict to the manifest's test frames")
    s.add_argument("--tolerance", type=float, help="centroid distance tolerance in pixels")

    s = sub.add_parser("render", parents=[common], help="super-resolution maps")
    s.add_argument("--data", required=True)
    s.add_argument("--detections", help="render these detections next to the ground truth")
    s.add_argument("--manifest", help="restrict to the manifest's test frames")
    return p


_FLAG_KEYS = {
    "seed": "seed", "threads": "threads", "n_frames": "simulate.n_frames", "previews": "simulate.previews",
    "test_size": "split.test_size", "epochs": "train.epochs", "tolerance": "evaluate.distance_tolerance",
}


def resolve_config(args) -> PipelineConfig:
    overrides = dict(args.overrides)
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "threshold", None) is not None:
        overrides["split.threshold" if args.command == "split" else "infer.threshold"] = args.threshold
    return load_config(args.config, overrides)


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, out: Path, cfg: PipelineConfig):
        self.command, self.out, self.cfg = command, out, cfg
        self.t0 = time.monotonic()
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / CONFIG_ECHO, cfg.to_json())
        self.events = out / EVENTS

    def event(self, **fields) -> None:
        with open(self.events, "a") as fh:
            fh.write(json.dumps({"command": self.command, **fields}, sort_keys=True) + "\n")

    def say(self, msg: str) -> None:
        print(f"[{self.command} {time.monotonic() - self.t0:7.1f}s] {msg}", file=sys.stderr, flush=True)


def _frames_subset(data: str, manifest: str | None):
    frames = read_sequence(data)
    if manifest:
        keep = set(SplitManifest.load(manifest).test_ids)
        frames = [f for f in frames if f.frame_index in keep]
    return frames


def _gt_subset(data: str, manifest: str | None):
    gt = read_ground_truth(data)
    if manifest:
        keep = set(SplitManifest.load(manifest).test_ids)
        gt = {k: v for k, v in gt.items() if k in keep}
    return gt


def cmd_simulate(args, cfg: PipelineConfig, run: Run) -> int:
    frames = simulate_sequence(cfg.simulate.scene, cfg.simulate.n_frames, np.random.default_rng(cfg.seed))
    write_sequence(frames, run.out, previews=cfg.simulate.previews)
    coco = export_coco(frames, run.out / "coco.json")
    coco.validate()
    n = sum(len(f.annotations) for f in frames)
    run.event(frames=len(frames), bubbles=n)
    run.say(f"wrote {len(frames)} frames with {n} bubbles to {run.out}")
    return EXIT_OK


def cmd_split(args, cfg: PipelineConfig, run: Run) -> int:
    frames = read_sequence(args.data)
    manifest = split_by_correlation(frames, cfg.split.test_size, cfg.split.threshold, np.random.default_rng(cfg.seed))
    worst = verify_split(frames, manifest)
    manifest.save(run.out / "split.json")
    run.event(train=len(manifest.train_ids), test=len(manifest.test_ids), shortfall=manifest.shortfall,
              max_correlation=worst)
    if manifest.shortfall:
        run.say(f"warning: only {len(manifest.test_ids)} of {cfg.split.test_size} test frames "
                f"have correlation < {cfg.split.threshold}")
    run.say(f"{len(manifest.train_ids)} train / {len(manifest.test_ids)} test, "
            f"max test-train correlation {worst:.4f}")
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig, run: Run) -> int:
    from .plotting import plot_training
    from .training import train

    frames = read_sequence(args.data)
    manifest = SplitManifest.load(args.manifest)
    by_id = {f.frame_index: f for f in frames}
    train_frames = [by_id[i] for i in manifest.train_ids]
    val_frames = [by_id[i] for i in manifest.test_ids]

    def on_epoch(record):
        run.event(**record)
        run.say(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items()))

    result = train(cfg, train_frames, val_frames, checkpoint_path=run.out / "model.ckpt",
                   log_path=run.out / "metrics.jsonl", resume=args.resume, on_epoch=on_epoch)
    if result.history:
        plot_training(result.history, run.out / "training.png")
    run.say(f"checkpoint at {run.out / 'model.ckpt'}")
    return EXIT_OK


def cmd_infer(args, cfg: PipelineConfig, run: Run) -> int:
    from .training import infer, load_model

    model, _ = load_model(args.checkpoint)
    # the detector comes from the checkpoint; inference knobs come from the effective config
    frames = _frames_subset(args.data, args.manifest)
    dets = infer(model, frames, cfg)
    write_detections(run.out / "detections.jsonl", dets)
    n = sum(len(v) for v in dets.values())
    run.event(frames=len(frames), detections=n)
    run.say(f"{n} detections in {len(frames)} frames")
    return EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig, run: Run) -> int:
    from .plotting import plot_pr_curves

    gt = _gt_subset(args.data, args.manifest)
    dets = read_detections(args.detections)
    ec = EvalConfig(cfg.evaluate.max_detections, cfg.evaluate.distance_tolerance)
    report = evaluate(dets, gt, ec)
    report.save(run.out / "metrics.json", run.out / "metrics.txt")
    plot_pr_curves(dets, gt, report, run.out / "pr_curves.png", max_detections=ec.max_detections)
    # delimited copy on stdout for piping
    print("metric\tvalue")
    for key in ("mAP", "mAR", "ap50", "ap75", "localization_precision", "localization_recall"):
        print(f"{key}\t{getattr(report, key):.6f}")
    run.event(**{k: v for k, v in report.to_dict().items() if not isinstance(v, list)})
    sys.stderr.write(report.table())
    return EXIT_OK


def cmd_render(args, cfg: PipelineConfig, run: Run) -> int:
    from .plotting import plot_sr_comparison

    rc = cfg.render_config()
    gt = _gt_subset(args.data, args.manifest)
    maps = {"ground truth": render_sequence({k: gt[k] for k in sorted(gt)}, rc)}
    if args.detections:
        dets = read_detections(args.detections)
        maps["detections"] = render_sequence({k: dets.get(k, []) for k in sorted(gt)}, rc)
    for title, sr in maps.items():
        stem = "sr_" + title.replace(" ", "_")
        export_image(sr, run.out / f"{stem}.png", cfg.render.colormap, cfg.render.gamma)
        save_raw(sr, run.out / f"{stem}.raw")
        run.event(map=stem, mass=sr.mass, frames=sr.frame_count)
        run.say(f"{stem}: {sr.mass:.0f} localizations over {sr.frame_count} frames")
    plot_sr_comparison(maps, run.out / "sr_comparison.png", cfg.render.colormap, cfg.render.gamma)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "split": cmd_split, "train": cmd_train,
            "infer": cmd_infer, "evaluate": cmd_evaluate, "render": cmd_render}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as exc:
        print(f"mbdetr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(cfg.threads)
    try:
        run = Run(args.command, Path(args.out), cfg)
        return COMMANDS[args.command](args, cfg, run)
    except (OSError, ValueError, KeyError, CheckpointError, RuntimeError) as exc:
        print(f"mbdetr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
