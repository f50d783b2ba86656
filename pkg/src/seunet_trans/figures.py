"""Matplotlib renderings written next to the delimited reports.

Training emits a loss/score curve, evaluation a per-image metric chart, and
prediction a side-by-side panel of input, probability map, thresholded mask,
and ground truth.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricReport

__all__ = ["save_loss_curve", "save_metric_figure", "save_prediction_panel"]

_DPI = 110


def save_loss_curve(logs: Sequence, path: Path) -> Path:
    """Per-epoch training loss, with the mean Dice score overlaid when logged."""
    path = Path(path)
    epochs = [log.epoch for log in logs]
    losses = [log.loss for log in logs]
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.plot(epochs, losses, color="tab:blue", lw=1.5, label="BCE loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE loss", color="tab:blue")
    ax.tick_params(axis="y", labelcolor="tab:blue")
    ax.grid(alpha=0.3)
    scored = [(log.epoch, log.mdc) for log in logs if log.mdc is not None]
    if scored:
        ax2 = ax.twinx()
        ax2.plot(*zip(*scored), color="tab:red", lw=1.2, label="mDC")
        ax2.set_ylabel("mean Dice", color="tab:red")
        ax2.set_ylim(0.0, 1.05)
        ax2.tick_params(axis="y", labelcolor="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_metric_figure(report: MetricReport, path: Path) -> Path:
    """Per-image Dice/IoU bars with dashed dataset means."""
    path = Path(path)
    idx = np.arange(report.image_count)
    dice = [m.dice for m in report.per_image]
    iou = [m.iou for m in report.per_image]
    width = 0.4
    fig_width = min(24.0, max(6.0, 0.5 * report.image_count + 3))
    fig, ax = plt.subplots(figsize=(fig_width, 4.0))
    ax.bar(idx - width / 2, dice, width, label="Dice", color="tab:blue")
    ax.bar(idx + width / 2, iou, width, label="IoU", color="tab:orange")
    ax.axhline(report.mdc, color="tab:blue", ls="--", lw=1, alpha=0.7)
    ax.axhline(report.miou, color="tab:orange", ls="--", lw=1, alpha=0.7)
    ax.set_xlabel("image")
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"mDC={report.mdc:.3f}  mIoU={report.miou:.3f}  "
                 f"mPre={report.mpre:.3f}  mRec={report.mrec:.3f}")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_prediction_panel(
    image: np.ndarray,
    probability: np.ndarray,
    mask: np.ndarray,
    path: Path,
    ground_truth: Optional[np.ndarray] = None,
) -> Path:
    """Input | probability | binarized mask (| ground truth) in one row."""
    path = Path(path)
    panels = [("input", image.transpose(1, 2, 0), None),
              ("probability", probability.squeeze(), "magma"),
              ("mask", mask.squeeze(), "gray")]
    if ground_truth is not None:
        panels.append(("ground truth", ground_truth.squeeze(), "gray"))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 3.2))
    for ax, (title, img, cmap) in zip(axes, panels):
        if cmap is None:
            ax.imshow(np.clip(img, 0, 1))
        else:
            ax.imshow(img, cmap=cmap, vmin=0.0, vmax=1.0)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path
