"""Pixel-level localization metrics: F1, IOU, and ROC-AUC.

All functions take numpy arrays: ``pred`` is a probability map in [0, 1]
(or an already-binary mask) and ``gt`` a {0, 1} mask of the same shape.
Thresholding uses >=, matching the decoding tie-break.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "ConfusionCounts",
    "confusion_counts",
    "pixel_f1",
    "pixel_iou",
    "pixel_auc",
    "aggregate",
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


def _validate(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred/gt shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt != 0


def confusion_counts(
    pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5
) -> ConfusionCounts:
    pred, pos = _validate(pred, gt)
    hit = pred >= threshold
    return ConfusionCounts(
        tp=int(np.sum(hit & pos)),
        fp=int(np.sum(hit & ~pos)),
        fn=int(np.sum(~hit & pos)),
        tn=int(np.sum(~hit & ~pos)),
    )


def pixel_f1(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """F1 = 2tp / (2tp + fp + fn); 0.0 when the denominator is empty."""
    c = confusion_counts(pred, gt, threshold)
    denom = 2 * c.tp + c.fp + c.fn
    return 2.0 * c.tp / denom if denom else 0.0


def pixel_iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """IOU = tp / (tp + fp + fn); 0.0 on an empty union."""
    c = confusion_counts(pred, gt, threshold)
    denom = c.tp + c.fp + c.fn
    return c.tp / denom if denom else 0.0


def pixel_auc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Rank-statistic ROC-AUC: P(score(pos) > score(neg)), ties counted 0.5.

    Raises if the ground truth contains a single class (AUC undefined).
    """
    pred, pos = _validate(pred, gt)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: ground truth contains a single class")
    ranks = rankdata(pred.ravel(), method="average")
    rank_sum = float(ranks[pos.ravel()].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def aggregate(per_image: Sequence[Mapping[str, float | None]]) -> dict[str, float]:
    """Arithmetic mean of each numeric metric across images.

    ``None`` entries (e.g. undefined AUC) are skipped per metric. Raises
    on empty input.
    """
    if not per_image:
        raise ValueError("aggregate needs at least one per-image record")
    keys: list[str] = []
    for rec in per_image:
        for k, v in rec.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool) and k not in keys:
                keys.append(k)
    summary: dict[str, float] = {}
    for k in keys:
        vals = [
            float(rec[k])
            for rec in per_image
            if isinstance(rec.get(k), (int, float)) and not isinstance(rec.get(k), bool)
        ]
        if vals:
            summary[k] = float(np.mean(vals))
    return summary
