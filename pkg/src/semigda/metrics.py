"""Dice, IoU and 95th-percentile Hausdorff distance for binary masks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ShapeError

_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} vs gt {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = p.sum() + g.sum()
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * np.logical_and(p, g).sum() / total


def iou_score(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 100.0
    return 100.0 * np.logical_and(p, g).sum() / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` removed by one 4-connected erosion (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def _distances_to(border: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Euclidean distance from each pixel in ``points`` to the nearest pixel of ``border``."""
    _, (iy, ix) = ndimage.distance_transform_edt(~border, return_indices=True)
    py, px = np.nonzero(points)
    dy = (py - iy[py, px]).astype(np.float64)
    dx = (px - ix[py, px]).astype(np.float64)
    return np.sqrt(dy * dy + dx * dx)


def hd95(pred, gt) -> float:
    """95th percentile (linear interpolation) of symmetric boundary distances, in pixels.

    One empty mask scores the image diagonal; two empty masks score 0.
    """
    p, g = _pair(pred, gt)
    p_any, g_any = p.any(), g.any()
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        return float(math.hypot(*p.shape))
    bp, bg = boundary(p), boundary(g)
    dists = np.concatenate([_distances_to(bg, bp), _distances_to(bp, bg)])
    return float(np.percentile(dists, 95, method="linear"))


@dataclass
class MetricsReport:
    dice_pct: float
    iou_pct: float
    hd95: float
    per_sample: list = field(default_factory=list)  # (id, dice, iou, hd95)

    def summary(self) -> dict:
        return {"dice_pct": self.dice_pct, "iou_pct": self.iou_pct, "hd95": self.hd95,
                "num_samples": len(self.per_sample)}

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "metrics.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "dice_pct", "iou_pct", "hd95"])
            for row in self.per_sample:
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
            w.writerow(["__mean__", repr(self.dice_pct), repr(self.iou_pct), repr(self.hd95)])
        json_path = out_dir / "metrics.json"
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return csv_path, json_path


def aggregate(rows) -> MetricsReport:
    """Dataset-level report as plain per-sample means."""
    rows = list(rows)
    if not rows:
        raise ValueError("no samples to aggregate")
    arr = np.array([[r[1], r[2], r[3]] for r in rows], dtype=np.float64)
    mean = arr.mean(axis=0)
    return MetricsReport(float(mean[0]), float(mean[1]), float(mean[2]), rows)
