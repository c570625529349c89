"""One-pass-evaluation metrics: precision, normalised precision, success.

Boxes are ``(x, y, w, h)`` in pixels with ``(x, y)`` the top-left corner.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

SR_THRESHOLDS = np.linspace(0.0, 1.0, 21)
NPR_THRESHOLDS = np.linspace(0.0, 0.5, 51)


@dataclass
class EvalResult:
    pr: float
    npr: float
    sr: float
    cle: np.ndarray
    iou: np.ndarray
    success_curve: np.ndarray = field(repr=False, default=None)

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou)) if len(self.iou) else 0.0

    def to_dict(self) -> dict:
        return {"pr": self.pr, "npr": self.npr, "sr": self.sr, "mean_iou": self.mean_iou,
                "frames": int(len(self.iou))}


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.atleast_2d(np.asarray(a, float)), np.atleast_2d(np.asarray(b, float))
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    # areas from the same corner differences as the overlap, so identical boxes give exactly 1
    area_a = (ax2 - a[:, 0]) * (ay2 - a[:, 1])
    area_b = (bx2 - b[:, 0]) * (by2 - b[:, 1])
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def center_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.atleast_2d(np.asarray(a, float)), np.atleast_2d(np.asarray(b, float))
    ca = a[:, :2] + a[:, 2:4] / 2
    cb = b[:, :2] + b[:, 2:4] / 2
    return np.sqrt(((ca - cb) ** 2).sum(axis=1))


def precision_rate(cle: np.ndarray, threshold: float = 20.0) -> float:
    cle = np.asarray(cle, float)
    return float(np.mean(cle < threshold)) if cle.size else 0.0


def normalized_precision(pred: np.ndarray, gt: np.ndarray) -> float:
    """Centre error over sqrt(w_gt * h_gt), averaged over thresholds in [0, 0.5]."""
    gt = np.atleast_2d(np.asarray(gt, float))
    ncle = center_error(pred, gt) / np.sqrt(gt[:, 2] * gt[:, 3])
    return float(np.mean([np.mean(ncle <= t) for t in NPR_THRESHOLDS]))


def success_curve(iou: np.ndarray) -> np.ndarray:
    iou = np.asarray(iou, float)
    return np.array([np.mean(iou >= t) for t in SR_THRESHOLDS])


def compute_metrics(pred, gt, norm: bool = True, cle_threshold: float = 20.0) -> EvalResult:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction/ground-truth length mismatch: {pred.shape} vs {gt.shape}")
    cle = center_error(pred, gt)
    iou = box_iou(pred, gt)
    curve = success_curve(iou)
    npr = normalized_precision(pred, gt) if norm else float("nan")
    return EvalResult(pr=precision_rate(cle, cle_threshold), npr=npr, sr=float(curve.mean()),
                      cle=cle, iou=iou, success_curve=curve)
