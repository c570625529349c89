"""Training objectives: tracking task loss, expert distillation and the
decoupled-representation terms (repulsion + reconstruction)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autograd import ops
from .autograd.nn import Conv2d, Linear, Module
from .autograd.tensor import ShapeError, Tensor, as_tensor
from .tracker import HeadTensors, decode_boxes, unpatchify

LOSS_COLUMNS = ("step", "l_task", "l_dist", "l_rep", "l_rec", "l_drf", "w_c", "w_d", "w_m")


# --------------------------------------------------------------- weighting
@dataclass(frozen=True)
class AdaptiveWeights:
    w_c: float
    w_d: float
    w_m: float
    fallback: bool = False

    def as_tuple(self):
        return (self.w_c, self.w_d, self.w_m)


def adaptive_weights(iou_c: float, iou_d: float, iou_m: float) -> AdaptiveWeights:
    """Normalise predicted IoUs into expert weights; all-zero falls back to uniform."""
    vals = [float(iou_c), float(iou_d), float(iou_m)]
    if any(v < 0 or not np.isfinite(v) for v in vals):
        raise ValueError(f"IoU estimates must be finite and non-negative, got {vals}")
    total = sum(vals)
    if total == 0.0:
        return AdaptiveWeights(1 / 3, 1 / 3, 1 / 3, fallback=True)
    return AdaptiveWeights(vals[0] / total, vals[1] / total, vals[2] / total)


def one_hot_weights(k: int) -> AdaptiveWeights:
    w = [0.0, 0.0, 0.0]
    w[k] = 1.0
    return AdaptiveWeights(*w)


def distillation_loss(i_pfa, experts: Sequence, w) -> Tensor:
    """sum_i w_i * mean((I_pfa - I_i)^2).

    ``w`` may be an :class:`AdaptiveWeights` (shared by the batch) or an
    (N, 3) array of per-sample weights for batched images.
    """
    i_pfa = as_tensor(getattr(i_pfa, "data", i_pfa) if not isinstance(i_pfa, Tensor) else i_pfa)
    imgs = [np.asarray(getattr(e, "data", e), dtype=np.float64) for e in experts]
    if len(imgs) != 3:
        raise ValueError(f"expected three expert images, got {len(imgs)}")
    for e in imgs:
        if e.shape != i_pfa.shape:
            raise ShapeError(f"expert image {e.shape} does not match fused image {i_pfa.shape}")
    if isinstance(w, AdaptiveWeights):
        total = None
        for wi, e in zip(w.as_tuple(), imgs):
            term = ops.scale(ops.mean_sq_err(i_pfa, e), wi)
            total = term if total is None else ops.add(total, term)
        return total
    w = np.asarray(w, dtype=np.float64)
    n = i_pfa.shape[0]
    if w.shape != (n, 3):
        raise ShapeError(f"per-sample weights must be ({n}, 3), got {w.shape}")
    axes = tuple(range(1, i_pfa.ndim))
    total = None
    for k, e in enumerate(imgs):
        per = ops.mean(ops.square(ops.sub(i_pfa, e)), axis=axes)  # (N,)
        term = ops.mean(ops.mul(per, w[:, k]))
        total = term if total is None else ops.add(total, term)
    return total


# ---------------------------------------------------------------- DRF terms
@dataclass(frozen=True)
class DrfConfig:
    alpha: float = 0.3
    lam: float = 1.0
    mode: str = "intent"  # or "literal"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not -1.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [-1, 1], got {self.alpha}")
        if self.mode not in ("intent", "literal"):
            raise ValueError(f"unknown repulsion mode {self.mode!r}")


@dataclass
class BranchFeatures:
    f_rgb: Tensor
    f_tir: Tensor
    f_f: Tensor

    def __post_init__(self):
        if not (self.f_rgb.shape == self.f_tir.shape == self.f_f.shape):
            raise ShapeError(f"branch feature shapes differ: {self.f_rgb.shape}, "
                             f"{self.f_tir.shape}, {self.f_f.shape}")


def _pooled(f: Tensor) -> Tensor:
    # (L, d) -> (d,), (N, L, d) -> (N, d)
    return ops.mean(f, axis=-2)


def repulsion_terms(feats: BranchFeatures, cfg: DrfConfig = DrfConfig()):
    """Per-modality hinge terms on the cosine of mean-pooled features."""
    pf = _pooled(feats.f_f)
    out = []
    for fm in (feats.f_rgb, feats.f_tir):
        cos = ops.cosine_sim(pf, _pooled(fm))
        gap = ops.add(cos, -cfg.alpha) if cfg.mode == "intent" else ops.sub(cfg.alpha, cos)
        out.append(ops.mean(ops.relu(gap)))
    return out


def repulsion_loss(feats: BranchFeatures, cfg: DrfConfig = DrfConfig()) -> Tensor:
    a, b = repulsion_terms(feats, cfg)
    return ops.add(a, b)


class ModalityDecoder(Module):
    """Token features -> image: linear un-patching followed by a 3x3 conv."""

    def __init__(self, dim: int, patch: int, grid: int, rng, channels: int = 3):
        self.patch, self.grid, self.channels = patch, grid, channels
        self.unpatch = Linear(dim, channels * patch * patch, rng)
        self.conv = Conv2d(channels, channels, 3, rng, padding=1)

    def forward(self, tokens: Tensor) -> Tensor:
        x = unpatchify(self.unpatch(tokens), self.patch, self.channels, self.grid, self.grid)
        return self.conv(x)


def reconstruction_loss(feats: BranchFeatures, decoders, originals) -> Tensor:
    """sum over modalities of mean((D_m(F_m + F_f) - I_m)^2)."""
    d_rgb, d_tir = decoders
    i_rgb, i_tir = originals
    total = None
    for dec, fm, img in ((d_rgb, feats.f_rgb, i_rgb), (d_tir, feats.f_tir, i_tir)):
        recon = dec(ops.add(fm, feats.f_f))
        img = as_tensor(img)
        if recon.shape != img.shape:
            raise ShapeError(f"decoder output {recon.shape} does not match image {img.shape}")
        term = ops.mean_sq_err(recon, img)
        total = term if total is None else ops.add(total, term)
    return total


# ---------------------------------------------------------------- task loss
@dataclass(frozen=True)
class TaskLossConfig:
    w_focal: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_iou: float = 1.0


def gt_cell(box: np.ndarray, grid: int) -> np.ndarray:
    """Flat index of the cell containing each normalised box centre."""
    box = np.atleast_2d(box)
    col = np.clip(np.floor(box[:, 0] * grid), 0, grid - 1).astype(int)
    row = np.clip(np.floor(box[:, 1] * grid), 0, grid - 1).astype(int)
    return row * grid + col


def gaussian_map(box, grid: int) -> np.ndarray:
    """Gaussian heat map peaking (exactly 1) at the centre cell of each box."""
    box = np.atleast_2d(np.asarray(box, dtype=np.float64))
    k = gt_cell(box, grid)
    rows, cols = np.divmod(k, grid)
    yy, xx = np.mgrid[0:grid, 0:grid]
    sig = np.maximum(np.maximum(box[:, 2], box[:, 3]) * grid / 6.0, 0.5)
    d2 = (yy[None] - rows[:, None, None]) ** 2 + (xx[None] - cols[:, None, None]) ** 2
    return np.exp(-d2 / (2 * sig[:, None, None] ** 2)).reshape(len(box), grid * grid)


def focal_loss(logits: Tensor, gt_map: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss on sigmoid logits (peaks are cells where gt == 1)."""
    gt_map = np.asarray(gt_map, dtype=np.float64)
    pos = (gt_map == 1.0).astype(np.float64)
    neg = 1.0 - pos
    p = ops.sigmoid(logits)
    log_p = ops.neg(ops.softplus(ops.neg(logits)))
    log_1mp = ops.neg(ops.softplus(logits))
    pos_term = ops.mul(ops.mul(ops.square(ops.sub(1.0, p)), log_p), pos)
    neg_term = ops.mul(ops.mul(ops.square(p), log_1mp), neg * (1.0 - gt_map) ** beta)
    n_pos = max(float(pos.sum()), 1.0)
    if alpha != 2.0:
        raise ValueError("only alpha=2 is supported")
    return ops.scale(ops.sum(ops.add(pos_term, neg_term)), -1.0 / n_pos)


def _corners(b: Tensor):
    cx, cy, w, h = (b[..., i] for i in range(4))
    return (ops.sub(cx, ops.scale(w, 0.5)), ops.sub(cy, ops.scale(h, 0.5)),
            ops.add(cx, ops.scale(w, 0.5)), ops.add(cy, ops.scale(h, 0.5)))


def giou_loss(pred: Tensor, gt) -> Tensor:
    """Mean of 1 - GIoU over (N, 4) cx,cy,w,h boxes."""
    gt = as_tensor(gt)
    px1, py1, px2, py2 = _corners(pred)
    gx1, gy1, gx2, gy2 = _corners(gt)
    iw = ops.relu(ops.sub(ops.minimum(px2, gx2), ops.maximum(px1, gx1)))
    ih = ops.relu(ops.sub(ops.minimum(py2, gy2), ops.maximum(py1, gy1)))
    inter = ops.mul(iw, ih)
    area_p = ops.mul(pred[..., 2], pred[..., 3])
    area_g = ops.mul(gt[..., 2], gt[..., 3])
    union = ops.sub(ops.add(area_p, area_g), inter)
    cw = ops.sub(ops.maximum(px2, gx2), ops.minimum(px1, gx1))
    ch = ops.sub(ops.maximum(py2, gy2), ops.minimum(py1, gy1))
    enclose = ops.mul(cw, ch)
    iou = ops.div(inter, union)
    giou = ops.sub(iou, ops.div(ops.sub(enclose, union), enclose))
    return ops.mean(ops.sub(1.0, giou))


def giou_value(a, b) -> np.ndarray:
    """Closed-form GIoU of (N, 4) cx,cy,w,h boxes (no autograd)."""
    a, b = np.atleast_2d(np.asarray(a, float)), np.atleast_2d(np.asarray(b, float))

    def corners(x):
        return x[:, 0] - x[:, 2] / 2, x[:, 1] - x[:, 3] / 2, x[:, 0] + x[:, 2] / 2, x[:, 1] + x[:, 3] / 2

    ax1, ay1, ax2, ay2 = corners(a)
    bx1, by1, bx2, by2 = corners(b)
    inter = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None) * \
        np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    enclose = (np.maximum(ax2, bx2) - np.minimum(ax1, bx1)) * (np.maximum(ay2, by2) - np.minimum(ay1, by1))
    return inter / union - (enclose - union) / enclose


def realized_iou(a, b) -> np.ndarray:
    """IoU of (N, 4) cx,cy,w,h boxes."""
    a, b = np.atleast_2d(np.asarray(a, float)), np.atleast_2d(np.asarray(b, float))
    iw = np.clip(np.minimum(a[:, 0] + a[:, 2] / 2, b[:, 0] + b[:, 2] / 2)
                 - np.maximum(a[:, 0] - a[:, 2] / 2, b[:, 0] - b[:, 2] / 2), 0, None)
    ih = np.clip(np.minimum(a[:, 1] + a[:, 3] / 2, b[:, 1] + b[:, 3] / 2)
                 - np.maximum(a[:, 1] - a[:, 3] / 2, b[:, 1] - b[:, 3] / 2), 0, None)
    inter = iw * ih
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def task_loss(head: HeadTensors, gt_boxes, gt_map: Optional[np.ndarray] = None,
              cfg: TaskLossConfig = TaskLossConfig(), with_iou: bool = True):
    """Focal + L1 + GIoU at the ground-truth cell, plus IoU-predictor MSE.

    Returns ``(loss, parts)`` where ``parts`` holds the detached component values.
    """
    gt = np.atleast_2d(np.asarray(gt_boxes, dtype=np.float64))
    if np.any(gt[:, 2] <= 0) or np.any(gt[:, 3] <= 0):
        raise ValueError(f"degenerate ground-truth box (w or h <= 0): {gt}")
    g = head.grid
    if gt_map is None:
        gt_map = gaussian_map(gt, g)
    k = gt_cell(gt, g)
    rows = np.arange(len(gt))
    off = head.offsets[rows, k]
    size = head.sizes[rows, k]
    col, row = k % g, k // g
    cx = ops.scale(ops.add(off[:, 0], col.astype(np.float64)), 1.0 / g)
    cy = ops.scale(ops.add(off[:, 1], row.astype(np.float64)), 1.0 / g)
    pred = ops.stack([cx, cy, size[:, 0], size[:, 1]], axis=1)
    l_focal = focal_loss(head.logits, gt_map)
    l_l1 = ops.mean(ops.abs(ops.sub(pred, gt)))
    l_giou = giou_loss(pred, gt)
    loss = ops.add(ops.add(ops.scale(l_focal, cfg.w_focal), ops.scale(l_l1, cfg.w_l1)),
                   ops.scale(l_giou, cfg.w_giou))
    parts = {"focal": l_focal.item(), "l1": l_l1.item(), "giou": l_giou.item()}
    if with_iou and cfg.w_iou > 0:
        boxes, _ = decode_boxes(head)
        target = realized_iou(boxes, gt)
        l_iou = ops.mean_sq_err(head.iou, target)
        loss = ops.add(loss, ops.scale(l_iou, cfg.w_iou))
        parts["iou"] = l_iou.item()
    return loss, parts


# ---------------------------------------------------------------- totals
@dataclass
class LossBreakdown:
    l_task: float = 0.0
    l_dist: float = 0.0
    l_rep: float = 0.0
    l_rec: float = 0.0
    l_drf: float = 0.0

    def as_row(self, step: int, w: Optional[AdaptiveWeights] = None) -> list:
        wt = w.as_tuple() if w is not None else (float("nan"),) * 3
        return [step, self.l_task, self.l_dist, self.l_rep, self.l_rec, self.l_drf, *wt]


def drf_total(l_task, l_rep, l_rec, cfg: DrfConfig = DrfConfig()):
    """l_task + lambda * (l_rep + l_rec); returns (differentiable total, breakdown)."""
    aux = ops.add(l_rep, l_rec)
    total = ops.add(l_task, ops.scale(aux, cfg.lam)) if cfg.lam != 0 else ops.add(l_task, 0.0)
    bd = LossBreakdown(l_task=as_tensor(l_task).item(), l_rep=as_tensor(l_rep).item(),
                       l_rec=as_tensor(l_rec).item(), l_drf=total.item())
    return total, bd


class LossLog:
    """Append-only CSV with the fixed loss columns."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(LOSS_COLUMNS)

    def write(self, step: int, bd: LossBreakdown, w: Optional[AdaptiveWeights] = None) -> None:
        self._w.writerow([_fmt(v) for v in bd.as_row(step, w)])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_loss_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
