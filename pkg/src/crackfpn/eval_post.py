"""Evaluation indices (IoU and hard Dice loss over crack pixels), dataset
aggregation into CSV/JSON reports, and the opt-in dilation+threshold
post-process that extends predictions into adjacent dark pixels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core_data import BinaryMask, RasterImage


def _check_extents(pred: BinaryMask, label: BinaryMask) -> None:
    if pred.data.shape != label.data.shape:
        raise ValueError(
            f"extent mismatch: pred {pred.data.shape} vs label {label.data.shape}"
        )


def iou(pred: BinaryMask, label: BinaryMask) -> float:
    """Intersection over union of crack pixels; 1.0 when both masks are empty."""
    _check_extents(pred, label)
    p = pred.data.astype(bool)
    t = label.data.astype(bool)
    union = int(np.count_nonzero(p | t))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & t)) / union


def dice_loss_metric(pred: BinaryMask, label: BinaryMask) -> float:
    """1 - 2|X∩Y| / (|X|+|Y|) on hard masks; 0.0 when both are empty."""
    _check_extents(pred, label)
    p = pred.data.astype(bool)
    t = label.data.astype(bool)
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(t))
    if total == 0:
        return 0.0
    return 1.0 - 2.0 * int(np.count_nonzero(p & t)) / total


@dataclass(frozen=True)
class ImageMetrics:
    image_id: str
    iou: float
    dice_loss: float
    crack_pixels_label: int
    crack_pixels_pred: int


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[ImageMetrics, ...]

    def __post_init__(self):
        if not self.rows:
            raise ValueError("a metrics report needs at least one image")

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def miou(self) -> float:
        return sum(r.iou for r in self.rows) / len(self.rows)

    @property
    def mean_dice_loss(self) -> float:
        return sum(r.dice_loss for r in self.rows) / len(self.rows)


def evaluate_dataset(predictions: dict[str, BinaryMask],
                     labels: dict[str, BinaryMask]) -> MetricsReport:
    """Per-image IoU / Dice loss over aligned id sets, ordered by image_id.

    Aggregate mIoU scores from the source experiments depend on the original
    dataset and are not reproducible from code alone; this reports whatever
    pairs it is given.
    """
    if not labels:
        raise ValueError("no labels to evaluate")
    missing = sorted(set(labels) - set(predictions))
    extra = sorted(set(predictions) - set(labels))
    if missing or extra:
        raise ValueError(
            f"prediction/label ids differ (missing predictions: {missing[:5]}, "
            f"unmatched predictions: {extra[:5]})"
        )
    rows = []
    for image_id in sorted(labels):
        pred = predictions[image_id]
        label = labels[image_id]
        rows.append(
            ImageMetrics(
                image_id=image_id,
                iou=iou(pred, label),
                dice_loss=dice_loss_metric(pred, label),
                crack_pixels_label=label.crack_pixels(),
                crack_pixels_pred=pred.crack_pixels(),
            )
        )
    return MetricsReport(tuple(rows))


def write_metrics_csv(report: MetricsReport, path) -> None:
    """One row per image plus an AGGREGATE row (means for the metrics,
    totals for the pixel counts)."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["image_id", "iou", "dice_loss", "crack_pixels_label", "crack_pixels_pred"]
        )
        for r in report.rows:
            writer.writerow(
                [r.image_id, f"{r.iou:.8f}", f"{r.dice_loss:.8f}",
                 r.crack_pixels_label, r.crack_pixels_pred]
            )
        writer.writerow(
            [
                "AGGREGATE",
                f"{report.miou:.8f}",
                f"{report.mean_dice_loss:.8f}",
                sum(r.crack_pixels_label for r in report.rows),
                sum(r.crack_pixels_pred for r in report.rows),
            ]
        )


def write_metrics_json(report: MetricsReport, path) -> None:
    payload = {
        "images": [
            {
                "image_id": r.image_id,
                "iou": r.iou,
                "dice_loss": r.dice_loss,
                "crack_pixels_label": r.crack_pixels_label,
                "crack_pixels_pred": r.crack_pixels_pred,
            }
            for r in report.rows
        ],
        "aggregate": {
            "count": report.count,
            "miou": report.miou,
            "mean_dice_loss": report.mean_dice_loss,
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_metrics_csv(path) -> MetricsReport:
    """Inverse of write_metrics_csv, dropping the AGGREGATE row."""
    rows = []
    with open(Path(path), newline="") as fh:
        for rec in csv.DictReader(fh):
            if rec["image_id"] == "AGGREGATE":
                continue
            rows.append(
                ImageMetrics(
                    image_id=rec["image_id"],
                    iou=float(rec["iou"]),
                    dice_loss=float(rec["dice_loss"]),
                    crack_pixels_label=int(rec["crack_pixels_label"]),
                    crack_pixels_pred=int(rec["crack_pixels_pred"]),
                )
            )
    return MetricsReport(tuple(rows))


# ---------------------------------------------------------------------------
# dilation + threshold crack extension
# ---------------------------------------------------------------------------

def luminance(photo: RasterImage) -> np.ndarray:
    """Per-pixel round(0.299 R + 0.587 G + 0.114 B) as uint8."""
    rgb = photo.data.astype(np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.floor(y + 0.5).astype(np.uint8)


@dataclass(frozen=True)
class PostprocessParams:
    """Dilation+threshold extension knobs. Disabled by default: whether the
    extension helps depends on the scene, so enabling it is a manual call."""

    enabled: bool = False
    kernel: int = 3
    iterations: int = 1
    intensity_threshold: int = 100

    def __post_init__(self):
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 3, got {self.kernel}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 <= self.intensity_threshold <= 255:
            raise ValueError("intensity_threshold must be an 8-bit value")


def dilate_threshold_extend(pred: BinaryMask, photo: RasterImage,
                            params: PostprocessParams) -> BinaryMask:
    """Extend a prediction into dark pixels: union the input with the pixels
    of its iterated k×k dilation whose luminance < intensity_threshold.

    Output is always a superset of the input; params.enabled=False or
    iterations=0 return the prediction unchanged.
    """
    if photo.data.shape[:2] != pred.data.shape:
        raise ValueError(
            f"extent mismatch: photo {photo.data.shape[:2]} vs pred {pred.data.shape}"
        )
    region = pred.data.astype(bool)
    if not params.enabled or params.iterations == 0:
        return BinaryMask(region.astype(np.uint8))
    structure = np.ones((params.kernel, params.kernel), dtype=bool)
    dilated = ndimage.binary_dilation(region, structure=structure,
                                      iterations=params.iterations)
    dark = luminance(photo) < params.intensity_threshold
    return BinaryMask((region | (dilated & dark)).astype(np.uint8))


def save_comparison_chart(reports: dict[str, MetricsReport], path) -> None:
    """Grouped bar chart of mIoU and mean Dice loss, one group per model."""
    if not reports:
        raise ValueError("no reports to chart")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(reports)
    x = np.arange(len(names))
    miou = [reports[n].miou for n in names]
    dice = [reports[n].mean_dice_loss for n in names]
    fig, ax = plt.subplots(figsize=(1.8 * len(names) + 2.5, 4.0))
    ax.bar(x - 0.2, miou, width=0.4, label="mIoU")
    ax.bar(x + 0.2, dice, width=0.4, label="mean Dice loss")
    for xi, v in zip(x - 0.2, miou):
        ax.text(xi, v + 0.01, f"{v:.2f}", ha="center", fontsize=8)
    for xi, v in zip(x + 0.2, dice):
        ax.text(xi, v + 0.01, f"{v:.2f}", ha="center", fontsize=8)
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
