"""Segmentation metrics: mean IoU and tolerance-based boundary F-score."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np


@dataclass
class IouReport:
    per_class: Dict[int, float]
    miou: float


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def evaluate_miou(predictions: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray],
                  num_classes: int) -> IouReport:
    """IoU per class (background included) accumulated over the split.

    Classes absent from both predictions and ground truth everywhere are left
    out of the mean.
    """
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(predictions, gt_masks):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"prediction {np.shape(p)} and ground truth {np.shape(g)} differ in shape")
        cm += confusion_matrix(p, g, num_classes)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    per_class = {c: float(inter[c] / union[c]) for c in range(num_classes) if union[c] > 0}
    miou = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return IouReport(per_class, miou)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of a different label."""
    m = np.asarray(mask)
    b = np.zeros(m.shape, dtype=bool)
    b[:-1, :] |= m[:-1, :] != m[1:, :]
    b[1:, :] |= m[1:, :] != m[:-1, :]
    b[:, :-1] |= m[:, :-1] != m[:, 1:]
    b[:, 1:] |= m[:, 1:] != m[:, :-1]
    return b


def _dilate_square(b: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev dilation by ``radius`` (a (2r+1)^2 square)."""
    if radius <= 0:
        return b.copy()
    H, W = b.shape
    p = np.pad(b, radius)
    out = np.zeros_like(b)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= p[dy:dy + H, dx:dx + W]
    return out


def boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance_px: int = 2) -> Optional[float]:
    """F-score of predicted vs true boundary pixels within a Chebyshev tolerance.

    Returns ``None`` when the ground truth has no boundary.
    """
    if tolerance_px < 0:
        raise ValueError("tolerance_px must be >= 0")
    bp, bg = boundary_pixels(pred), boundary_pixels(gt)
    if not bg.any():
        return None
    if not bp.any():
        return 0.0
    precision = (bp & _dilate_square(bg, tolerance_px)).sum() / bp.sum()
    recall = (bg & _dilate_square(bp, tolerance_px)).sum() / bg.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def evaluate_boundary_f(predictions: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray],
                        tolerance_px: int = 2) -> float:
    """Mean per-image boundary F over images whose ground truth has a boundary."""
    scores = [boundary_f(p, g, tolerance_px) for p, g in zip(predictions, gt_masks)]
    scores = [s for s in scores if s is not None]
    return float(np.mean(scores)) if scores else float("nan")
