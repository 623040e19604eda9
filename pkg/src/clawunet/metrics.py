"""Binary segmentation metrics: confusion counts, Dice, two-class mean IoU and
average Hausdorff distance over 4-connected boundaries.

Empty-mask conventions: Dice is 1.0 when both masks are empty; an IoU class with
an empty denominator contributes 1.0; the average Hausdorff distance is
undefined (``None``) when either boundary set is empty.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int


def _as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or min(m.shape) < 1:
        raise ValueError(f"mask must be a non-empty 2D array, got shape {m.shape}")
    return m.astype(bool, copy=False)


def confusion(pred, truth) -> ConfusionCounts:
    pred, truth = _as_mask(pred), _as_mask(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask extents differ: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def iou_foreground(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def iou_background(c: ConfusionCounts) -> float:
    denom = c.tn + c.fp + c.fn
    return 1.0 if denom == 0 else c.tn / denom


def miou(c: ConfusionCounts) -> float:
    return (iou_foreground(c) + iou_background(c)) / 2


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour that is background or off-grid, as ``(k, 2)`` (row, col)."""
    m = _as_mask(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def average_hausdorff(a, b, mode: str = "max") -> float | None:
    """Symmetric average Hausdorff distance between point sets ``a`` and ``b``.

    ``mode="max"`` returns the larger of the two directed mean nearest-neighbour
    distances; ``mode="mean"`` returns their average. Returns ``None`` if either set
    is empty.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        return None
    d_ab = cKDTree(b).query(a)[0].mean()
    d_ba = cKDTree(a).query(b)[0].mean()
    if mode == "max":
        return float(max(d_ab, d_ba))
    if mode == "mean":
        return float((d_ab + d_ba) / 2)
    raise ValueError(f"unknown mode {mode!r}")


def mask_hausdorff(pred, truth, mode: str = "max") -> float | None:
    return average_hausdorff(boundary(pred), boundary(truth), mode)


@dataclass
class ImageMetrics:
    image: str
    miou: float
    dice: float
    aver_hd: float | None


@dataclass
class MetricsReport:
    """Per-image metrics and their means. Undefined distances are excluded from the mean and counted."""

    images: list = field(default_factory=list)
    miou: float = math.nan
    dice: float = math.nan
    aver_hd: float | None = None
    undefined_hd: int = 0

    def means(self) -> tuple:
        return self.miou, self.dice, self.aver_hd

    def to_dict(self) -> dict:
        return {
            "images": [vars(m) for m in self.images],
            "aggregate": {"miou": self.miou, "dice": self.dice, "aver_hd": self.aver_hd,
                          "undefined_aver_hd": self.undefined_hd, "count": len(self.images)},
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image", "miou", "dice", "aver_hd"])
            for m in self.images:
                w.writerow([m.image, repr(m.miou), repr(m.dice), "" if m.aver_hd is None else repr(m.aver_hd)])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def summary(self) -> str:
        """Table-style line: percentages with two decimals, distance in pixels."""
        hd = "n/a" if self.aver_hd is None else f"{self.aver_hd:.2f}"
        return f"MIoU {100 * self.miou:.2f}%  Dice {100 * self.dice:.2f}%  Aver_hd {hd}  (n={len(self.images)})"


def evaluate_pair(pred, truth, image_id: str = "", hd_mode: str = "max") -> ImageMetrics:
    c = confusion(pred, truth)
    return ImageMetrics(image_id, miou(c), dice(c), mask_hausdorff(pred, truth, hd_mode))


def evaluate_set(pred_masks, truth_masks, ids=None, hd_mode: str = "max") -> MetricsReport:
    pred_masks, truth_masks = list(pred_masks), list(truth_masks)
    if len(pred_masks) != len(truth_masks):
        raise ValueError(f"{len(pred_masks)} predictions for {len(truth_masks)} ground-truth masks")
    if not pred_masks:
        raise ValueError("cannot evaluate an empty set")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pred_masks))]
    per = [evaluate_pair(p, t, i, hd_mode) for p, t, i in zip(pred_masks, truth_masks, ids)]
    hds = [m.aver_hd for m in per if m.aver_hd is not None]
    return MetricsReport(
        images=per,
        miou=float(np.mean([m.miou for m in per])),
        dice=float(np.mean([m.dice for m in per])),
        aver_hd=float(np.mean(hds)) if hds else None,
        undefined_hd=len(per) - len(hds),
    )
