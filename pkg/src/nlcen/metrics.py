"""Pixel-level overlap metrics for binary segmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _binary(name: str, a) -> np.ndarray:
    a = np.asarray(a)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must be a binary mask (values 0/1)")
    return a.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _binary("pred", pred), _binary("gt", gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, tn, fp, fn)


def dic(c: ConfusionCounts) -> float:
    """Dice coefficient ``2TP / (2TP + FN + FP)``; 1.0 when both masks are empty."""
    denom = 2 * c.tp + c.fn + c.fp
    return 1.0 if denom == 0 else 2 * c.tp / denom


def jsc(c: ConfusionCounts) -> float:
    """Jaccard index ``TP / (TP + FN + FP)``; 1.0 when both masks are empty."""
    denom = c.tp + c.fn + c.fp
    return 1.0 if denom == 0 else c.tp / denom


def per_image_scores(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    """DIC and JSC for each (pred, gt) pair along the first axis."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} masks")
    counts = [confusion(p, g) for p, g in zip(preds, gts)]
    return np.array([dic(c) for c in counts]), np.array([jsc(c) for c in counts])
