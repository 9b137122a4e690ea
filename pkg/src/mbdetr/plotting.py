"""Report figures (precision/recall curves, SR map comparison) written with the Agg backend."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport, precision_recall_curve  # noqa: E402
from .io import atomic_write_bytes  # noqa: E402
from .renderer import SRMap, to_rgb  # noqa: E402

# no software/date stamp, so the same figure always gives the same bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return atomic_write_bytes(path, buf.getvalue())


def plot_pr_curves(detections: dict, ground_truth: dict, report: EvalReport, path,
                   ious=(0.5, 0.75), max_detections: int = 100) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for iou in ious:
        recall, precision = precision_recall_curve(detections, ground_truth, iou, max_detections)
        ax.plot(recall, precision, label=f"IoU {iou:.2f}")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"mAP {report.mAP:.3f}, AP50 {report.ap50:.3f}, mAR {report.mAR:.3f}")
    ax.legend(loc="lower left")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_sr_comparison(maps: dict[str, SRMap], path, colormap: str = "afmhot", gamma: float = 0.5) -> Path:
    """Side-by-side SR maps, one panel per entry of ``maps`` (title -> map)."""
    fig, axes = plt.subplots(1, len(maps), figsize=(4 * len(maps), 4), squeeze=False)
    for ax, (title, sr) in zip(axes[0], maps.items()):
        ax.imshow(to_rgb(sr.grid, colormap, gamma), extent=(0, sr.width, sr.height, 0), interpolation="nearest")
        ax.set_title(f"{title} ({sr.mass:.0f} localizations)")
        ax.set_xlabel("x (px)")
        ax.set_ylabel("y (px)")
    fig.tight_layout()
    return _save(fig, path)


def plot_training(history: list[dict], path) -> Path:
    epochs = np.array([r["epoch"] for r in history])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(epochs, [r["loss"] for r in history], label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("set loss")
    if any("val_ap50" in r for r in history):
        ax2 = ax.twinx()
        val = [(r["epoch"], r["val_ap50"]) for r in history if "val_ap50" in r]
        ax2.plot(*zip(*val), color="tab:orange", label="val AP50")
        ax2.set_ylabel("val AP50")
        ax2.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, path)
