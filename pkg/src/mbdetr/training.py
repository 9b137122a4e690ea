"""Training loop, batched inference and the glue between detector, loss and post-processing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import PipelineConfig, config_from_dict
from .criterion import set_loss
from .dataset import PatchLayout, augment, split_patches
from .detector import Detector, DetectorConfig
from .evaluation import EvalConfig, EvalReport, evaluate
from .io import atomic_write_text
from .numerics import DTYPE, NonFiniteError, softmax
from .postprocess import Detection, extract, merge_patches
from .simulator import Frame

log = logging.getLogger(__name__)


def patch_targets(patch: Frame) -> torch.Tensor:
    """Annotations of a patch as normalized ``(cx, cy, w, h)`` box rows."""
    h, w = patch.image.shape
    rows = [((x + bw / 2) / w, (y + bh / 2) / h, bw / w, bh / h) for x, y, bw, bh in (a.box for a in patch.annotations)]
    return torch.tensor(rows, dtype=DTYPE).reshape(-1, 4)


def frame_samples(frame: Frame, layout: PatchLayout) -> list[tuple[np.ndarray, torch.Tensor]]:
    return [(p.image, patch_targets(p)) for p in split_patches(frame, layout)]


def stack_images(images) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(im, dtype=np.float64) for im in images])[:, None])


def batch_loss(model: Detector, images: torch.Tensor, targets: list[torch.Tensor], cfg: PipelineConfig) -> torch.Tensor:
    """Mean set-prediction loss over a batch; all decoder layers when auxiliary loss is on."""
    out = model(images)
    logits, boxes = out["logits"], out["boxes"]
    if not cfg.loss.aux:
        logits, boxes = logits[-1:], boxes[-1:]
    total = 0.0
    for b, gt in enumerate(targets):
        loss, _ = set_loss(logits[:, b], boxes[:, b], gt, cfg.loss.weights)
        total = total + loss
    return total / len(targets)


def learning_rate(cfg: PipelineConfig, epoch: int) -> float:
    """Step schedule: base rate, divided by ten once ``lr_drop`` of the epochs are done."""
    drop_at = math.ceil(cfg.train.lr_drop * cfg.train.epochs)
    return cfg.train.lr * (0.1 if epoch >= drop_at else 1.0)


def make_optimizer(model: Detector, cfg: PipelineConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)


@dataclass
class TrainResult:
    model: Detector
    history: list[dict] = field(default_factory=list)


def _epoch_samples(frames: list[Frame], layout: PatchLayout, cfg: PipelineConfig, rng: np.random.Generator):
    samples = []
    for i in rng.permutation(len(frames)):
        f = frames[i]
        if cfg.train.augment:
            f = augment(f, rng, cfg.train.scale_range)
        samples.extend(frame_samples(f, layout))
    order = rng.permutation(len(samples))
    return [samples[i] for i in order]


def train(cfg: PipelineConfig, train_frames: list[Frame], val_frames: list[Frame] | None = None,
          checkpoint_path=None, log_path=None, resume: bool = False, on_epoch=None) -> TrainResult:
    """Train from scratch (or resume from ``checkpoint_path``) for ``cfg.train.epochs`` epochs.

    Epoch ``e`` draws its shuffling and augmentation from a generator seeded
    with ``(seed, e)``, so a resumed run repeats an uninterrupted one exactly.
    The checkpoint and the JSON-lines log are rewritten atomically after
    every epoch.
    """
    if not train_frames:
        raise ValueError("no training frames")
    s = cfg.simulate.scene
    layout = PatchLayout(s.height, s.width)
    torch.set_num_threads(cfg.threads)
    model = Detector(cfg.detector, seed=cfg.seed)
    optimizer = make_optimizer(model, cfg)
    history: list[dict] = []
    start = 0
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        meta, tensors = ckpt.load(checkpoint_path)
        _check_compatible(cfg, meta)
        ckpt.restore_model(model, tensors)
        ckpt.restore_optimizer(optimizer, meta, tensors)
        history = list(meta.get("history", []))
        start = int(meta["epoch"])
        log.info("resuming after epoch %d", start)

    for epoch in range(start, cfg.train.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = learning_rate(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        samples = _epoch_samples(train_frames, layout, cfg, rng)
        model.train()
        losses = []
        bs = cfg.train.batch_size
        for k in range(0, len(samples), bs):
            chunk = samples[k:k + bs]
            images = stack_images([c[0] for c in chunk])
            loss = batch_loss(model, images, [c[1] for c in chunk], cfg)
            if not torch.isfinite(loss.detach()):
                raise NonFiniteError(f"loss became non-finite in epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.train.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
            optimizer.step()
            losses.append(float(loss.detach()))
        record = {"epoch": epoch + 1, "lr": lr, "loss": float(np.mean(losses))}
        if val_frames and cfg.train.val_every and (epoch + 1) % cfg.train.val_every == 0:
            report = validate(model, val_frames, cfg)
            record.update(val_mAP=report.mAP, val_ap50=report.ap50, val_loc_recall=report.localization_recall)
        history.append(record)
        log.info(json.dumps(record))
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, cfg, epoch + 1, history, optimizer)
        if log_path is not None:
            atomic_write_text(log_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in history))
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(model, history)


def _check_compatible(cfg: PipelineConfig, meta: dict) -> None:
    saved = meta.get("config", {})
    if saved.get("detector") != cfg.detector.to_dict():
        raise ckpt.CheckpointError("checkpoint was trained with a different detector configuration")
    if saved.get("seed") != cfg.seed:
        raise ckpt.CheckpointError("checkpoint was trained with a different seed")


def save_checkpoint(path, model: Detector, cfg: PipelineConfig, epoch: int, history: list[dict],
                    optimizer: torch.optim.Optimizer | None = None) -> Path:
    meta = {"config": cfg.to_dict(), "epoch": epoch, "history": history}
    return ckpt.save(path, model, meta, optimizer)


def load_model(path, cfg: PipelineConfig | None = None) -> tuple[Detector, PipelineConfig]:
    """Rebuild the detector stored in a checkpoint; its own config is used unless one is given."""
    meta, tensors = ckpt.load(path)
    saved = config_from_dict(meta["config"])
    cfg = cfg or saved
    if cfg.detector != saved.detector:
        raise ckpt.CheckpointError("checkpoint was trained with a different detector configuration")
    model = Detector(DetectorConfig.from_dict(meta["config"]["detector"]), seed=saved.seed)
    ckpt.restore_model(model, tensors)
    return model, cfg


@torch.no_grad()
def infer(model: Detector, frames: list[Frame], cfg: PipelineConfig) -> dict[int, list[Detection]]:
    """Patch split, batched detection, thresholding and border merge for every frame."""
    model.eval()
    if not frames:
        return {}
    layout = PatchLayout(frames[0].height, frames[0].width)
    patches = [(i, p, sub.image) for i, f in enumerate(frames) for p, sub in enumerate(split_patches(
        Frame(f.image, [], f.frame_index), layout))]
    per_frame: list[list[list[Detection]]] = [[[] for _ in range(4)] for _ in frames]
    bs = cfg.infer.batch_size
    for k in range(0, len(patches), bs):
        chunk = patches[k:k + bs]
        out = model(stack_images([c[2] for c in chunk]))
        probs = softmax(out["logits"][-1], axis=-1)
        boxes = out["boxes"][-1]
        for (i, p, _), pr, bx in zip(chunk, probs, boxes):
            per_frame[i][p] = extract(pr, bx, layout.patch_size, cfg.infer.threshold, p)
    return {f.frame_index: merge_patches(per_frame[i], layout, cfg.infer.band, cfg.infer.radius)
            for i, f in enumerate(frames)}


def validate(model: Detector, frames: list[Frame], cfg: PipelineConfig) -> EvalReport:
    dets = infer(model, frames, cfg)
    gts = {f.frame_index: f.annotations for f in frames}
    return evaluate(dets, gts, EvalConfig(cfg.evaluate.max_detections, cfg.evaluate.distance_tolerance))
