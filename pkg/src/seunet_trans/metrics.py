"""Confusion counts and dataset-mean segmentation metrics.

Per image: Dice = 2TP/(2TP+FP+FN), IoU = TP/(TP+FP+FN), precision =
TP/(TP+FP), recall = TP/(TP+FN). Dataset values are the arithmetic mean of
the per-image values (no global pixel pooling). Any 0/0 ratio is defined as
1: an empty prediction of an empty ground truth is correct.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ShapeError

__all__ = [
    "ConfusionCounts",
    "ImageMetrics",
    "MetricReport",
    "confusion_counts",
    "image_metrics",
    "dataset_metrics",
    "format_report_table",
    "report_keyvalues",
    "per_image_tsv",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ImageMetrics:
    dice: float
    iou: float
    precision: float
    recall: float


@dataclass
class MetricReport:
    per_image: list[ImageMetrics]
    counts: list[ConfusionCounts]
    mdc: float
    miou: float
    mpre: float
    mrec: float

    @property
    def image_count(self) -> int:
        return len(self.per_image)


def _validate_binary(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr


def confusion_counts(pred_binary, gt) -> ConfusionCounts:
    """Pixelwise TP/FP/FN/TN between two binary masks of equal shape."""
    p = _validate_binary(pred_binary, "prediction")
    g = _validate_binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ShapeError(f"confusion_counts shape mismatch: {p.shape} vs {g.shape}")
    p = p.astype(bool)
    g = g.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 1.0


def image_metrics(c: ConfusionCounts) -> ImageMetrics:
    return ImageMetrics(
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        iou=_ratio(c.tp, c.tp + c.fp + c.fn),
        precision=_ratio(c.tp, c.tp + c.fp),
        recall=_ratio(c.tp, c.tp + c.fn),
    )


def dataset_metrics(predictions: Sequence, gts: Sequence, threshold: float = 0.5) -> MetricReport:
    """Binarize probability maps at ``threshold`` (>= counts as positive),
    score each image, and average the per-image metrics."""
    if len(predictions) == 0:
        raise ValueError("dataset_metrics needs at least one image")
    if len(predictions) != len(gts):
        raise ShapeError(f"{len(predictions)} predictions vs {len(gts)} ground truths")
    per_image: list[ImageMetrics] = []
    counts: list[ConfusionCounts] = []
    for pred, gt in zip(predictions, gts):
        pred = np.asarray(pred)
        if pred.min() < 0 or pred.max() > 1:
            raise ValueError(f"predictions must lie in [0, 1], got [{pred.min()}, {pred.max()}]")
        binary = (pred >= threshold).astype(np.uint8)
        c = confusion_counts(binary, gt)
        counts.append(c)
        per_image.append(image_metrics(c))
    t = len(per_image)
    return MetricReport(
        per_image=per_image,
        counts=counts,
        mdc=sum(m.dice for m in per_image) / t,
        miou=sum(m.iou for m in per_image) / t,
        mpre=sum(m.precision for m in per_image) / t,
        mrec=sum(m.recall for m in per_image) / t,
    )


def format_report_table(report: MetricReport) -> str:
    """Plain-text table: one row per image plus the dataset means."""
    header = f"{'image':>8} {'DC':>8} {'IoU':>8} {'Pre':>8} {'Rec':>8} {'TP':>8} {'FP':>8} {'FN':>8} {'TN':>8}"
    rows = [header, "-" * len(header)]
    for i, (m, c) in enumerate(zip(report.per_image, report.counts)):
        rows.append(
            f"{i:>8d} {m.dice:>8.4f} {m.iou:>8.4f} {m.precision:>8.4f} {m.recall:>8.4f} "
            f"{c.tp:>8d} {c.fp:>8d} {c.fn:>8d} {c.tn:>8d}"
        )
    rows.append("-" * len(header))
    rows.append(
        f"{'mean':>8} {report.mdc:>8.4f} {report.miou:>8.4f} {report.mpre:>8.4f} {report.mrec:>8.4f}"
    )
    return "\n".join(rows) + "\n"


def report_keyvalues(report: MetricReport) -> str:
    return (
        f"images={report.image_count}\n"
        f"mDC={report.mdc:.6f}\n"
        f"mIoU={report.miou:.6f}\n"
        f"mPre={report.mpre:.6f}\n"
        f"mRec={report.mrec:.6f}\n"
    )


def per_image_tsv(report: MetricReport) -> str:
    lines = ["image\tdice\tiou\tprecision\trecall\ttp\tfp\tfn\ttn"]
    for i, (m, c) in enumerate(zip(report.per_image, report.counts)):
        lines.append(
            f"{i}\t{m.dice:.6f}\t{m.iou:.6f}\t{m.precision:.6f}\t{m.recall:.6f}"
            f"\t{c.tp}\t{c.fp}\t{c.fn}\t{c.tn}"
        )
    return "\n".join(lines) + "\n"


def write_report(report: MetricReport, out_dir: Path) -> dict[str, Path]:
    """Write the table, key-value, and per-image TSV files into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "table": out_dir / "report.txt",
        "keyvalues": out_dir / "report.kv",
        "tsv": out_dir / "metrics.tsv",
    }
    paths["table"].write_text(format_report_table(report))
    paths["keyvalues"].write_text(report_keyvalues(report))
    paths["tsv"].write_text(per_image_tsv(report))
    return paths
