"""Evaluation metrics: Dice score in percent and Hausdorff distance in mm.

Both operate on binary masks (numpy bool/int arrays). The Hausdorff distance
accounts for physical pixel spacing and matches a brute-force pairwise
computation exactly, not approximately; the implementation below only
vectorizes the same arithmetic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyMaskError, ShapeError


def _as_binary(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        uniq = np.unique(arr)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ValueError(f"{name} must be binary, found values {uniq[:5]}")
        arr = arr.astype(bool)
    return arr


def dice_score(pred_mask: np.ndarray, target_mask: np.ndarray) -> float:
    """Dice overlap in percent. Two empty masks count as perfect agreement."""
    pred = _as_binary(pred_mask, "pred_mask")
    target = _as_binary(target_mask, "target_mask")
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    p = int(pred.sum())
    t = int(target.sum())
    if p == 0 and t == 0:
        return 100.0
    inter = int(np.logical_and(pred, target).sum())
    return 100.0 * 2.0 * inter / (p + t)


def hausdorff_mm(
    pred_mask: np.ndarray,
    target_mask: np.ndarray,
    spacing_mm: Sequence[float],
    chunk: int = 2048,
) -> float:
    """Symmetric Hausdorff distance between foreground point sets, in mm.

    Pixel coordinates are scaled by (row_spacing, col_spacing) before the
    pairwise distances. Raises EmptyMaskError if either mask has no
    foreground; the evaluation layer decides how to score such cases.
    """
    pred = _as_binary(pred_mask, "pred_mask")
    target = _as_binary(target_mask, "target_mask")
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    if spacing.shape != (2,) or not np.all(spacing > 0):
        raise ValueError(f"spacing_mm must be two positive reals, got {spacing_mm!r}")
    p_pts = np.argwhere(pred).astype(np.float64) * spacing
    t_pts = np.argwhere(target).astype(np.float64) * spacing
    if p_pts.shape[0] == 0:
        raise EmptyMaskError("pred_mask has no foreground")
    if t_pts.shape[0] == 0:
        raise EmptyMaskError("target_mask has no foreground")
    worst_sq = max(
        _directed_max_min_sq(p_pts, t_pts, chunk),
        _directed_max_min_sq(t_pts, p_pts, chunk),
    )
    return float(np.sqrt(worst_sq))


def _directed_max_min_sq(src: np.ndarray, dst: np.ndarray, chunk: int) -> float:
    """max over src points of the min squared distance to dst points."""
    worst = 0.0
    for start in range(0, src.shape[0], chunk):
        block = src[start : start + chunk]
        # (n, m) squared distances, coordinate-wise to keep the arithmetic
        # identical to a scalar loop: (dy*dy) + (dx*dx)
        dy = block[:, 0:1] - dst[None, :, 0]
        dx = block[:, 1:2] - dst[None, :, 1]
        dist_sq = dy * dy + dx * dx
        block_worst = float(dist_sq.min(axis=1).max())
        worst = max(worst, block_worst)
    return worst


@dataclass
class MetricRow:
    """One evaluation record: a (case, class) pair with its scores.

    hd_mm is None when the distance was skipped because a mask was empty;
    such cases are tallied separately as misses.
    """

    case_id: str
    class_name: str
    dice_pct: float
    hd_mm: float | None


def write_metric_csv(path: str | Path, rows: Iterable[MetricRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["case_id", "class", "dice_pct", "hd_mm"])
        for row in rows:
            writer.writerow(
                [
                    row.case_id,
                    row.class_name,
                    f"{row.dice_pct:.4f}",
                    "" if row.hd_mm is None else f"{row.hd_mm:.4f}",
                ]
            )


def read_metric_csv(path: str | Path) -> list[MetricRow]:
    rows: list[MetricRow] = []
    with open(path, newline="", encoding="utf-8") as handle:
        for rec in csv.DictReader(handle):
            rows.append(
                MetricRow(
                    case_id=rec["case_id"],
                    class_name=rec["class"],
                    dice_pct=float(rec["dice_pct"]),
                    hd_mm=float(rec["hd_mm"]) if rec["hd_mm"] != "" else None,
                )
            )
    return rows
