"""Modality-gap analysis with a Gaussian-kernel MMD.

:class:`FusionLocationTracker` is a two-stream tracker whose RGB and TIR
streams run through separate embeddings and the first ``k`` encoder layers,
are merged by token averaging, and share the remaining layers.  ``k = 0`` is
pixel-level fusion: the two images are averaged before embedding.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autograd import ops
from .autograd.nn import LayerNorm, Module
from .autograd.tensor import Tensor, no_grad
from .tracker import EncoderBlock, HeadTensors, IouPredictor, PatchEmbed, TrackerConfig, TrackHead

KINDS = ("biased", "unbiased")
BANDWIDTH_FLOOR = 1e-6


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def _kernel(x: np.ndarray, y: np.ndarray, bandwidth: float) -> np.ndarray:
    d2 = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
    return np.exp(-d2 / (2.0 * bandwidth * bandwidth))


def _fsum(a: np.ndarray) -> float:
    return math.fsum(a.ravel().tolist())


def mmd2(x, y, bandwidth: Optional[float] = None, kind: str = "biased") -> float:
    """Squared MMD with kernel exp(-|a-b|^2 / (2 sigma^2)).

    Sums are exactly rounded, so the estimate is exactly symmetric in (x, y).
    ``bandwidth=None`` uses the median heuristic on the pooled sample.
    """
    x, y = _as_points(x), _as_points(y)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    if kind not in KINDS:
        raise ValueError(f"unknown estimator {kind!r}")
    if bandwidth is None:
        bandwidth = median_bandwidth(np.concatenate([x, y]))
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    n, m = len(x), len(y)
    kxx, kyy, kxy = _kernel(x, x, bandwidth), _kernel(y, y, bandwidth), _kernel(x, y, bandwidth)
    if kind == "biased":
        return _fsum(kxx) / (n * n) + _fsum(kyy) / (m * m) - 2.0 * _fsum(kxy) / (n * m)
    if n < 2 or m < 2:
        raise ValueError("unbiased MMD needs at least two points per set")
    sxx = _fsum(kxx) - _fsum(np.diag(kxx))
    syy = _fsum(kyy) - _fsum(np.diag(kyy))
    if n == m:
        # paired U-statistic: the cross term also skips i == j
        sxy = _fsum(kxy) - _fsum(np.diag(kxy))
        return (sxx + syy - 2.0 * sxy) / (n * (n - 1))
    return sxx / (n * (n - 1)) + syy / (m * (m - 1)) - 2.0 * _fsum(kxy) / (n * m)


def median_bandwidth(z) -> float:
    """Median pairwise Euclidean distance, floored at 1e-6."""
    z = _as_points(z)
    if len(z) < 2:
        raise ValueError("median heuristic needs at least two points")
    iu = np.triu_indices(len(z), k=1)
    d = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=-1))[iu]
    return max(float(np.median(d)), BANDWIDTH_FLOOR)


# ------------------------------------------------------------------ report
@dataclass
class MmdReport:
    fusion_layer: int
    layer_mmd2: List[float]
    final_mmd2: float
    bandwidths: List[float] = field(default_factory=list)
    kind: str = "biased"

    def to_csv(self, path) -> Path:
        p = Path(path)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "mmd2"])
            for i, v in enumerate(self.layer_mmd2, start=1):
                w.writerow([i, repr(float(v))])
            w.writerow(["final", repr(float(self.final_mmd2))])
        meta = p.with_suffix(".meta.csv")
        with open(meta, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fusion_layer", "kind", "bandwidths"])
            w.writerow([self.fusion_layer, self.kind, " ".join(repr(float(b)) for b in self.bandwidths)])
        return p

    @classmethod
    def from_csv(cls, path) -> "MmdReport":
        p = Path(path)
        layers, final = [], float("nan")
        with open(p, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["layer"] == "final":
                    final = float(row["mmd2"])
                else:
                    layers.append(float(row["mmd2"]))
        with open(p.with_suffix(".meta.csv"), newline="") as fh:
            meta = next(csv.DictReader(fh))
        bw = [float(b) for b in meta["bandwidths"].split()] if meta["bandwidths"] else []
        return cls(int(meta["fusion_layer"]), layers, final, bw, meta["kind"])


# ------------------------------------------------------------ gap tracker
class FusionLocationTracker(Module):
    def __init__(self, cfg: TrackerConfig, fusion_layer: int, rng: Optional[np.random.Generator] = None):
        if not 0 <= fusion_layer <= cfg.depth:
            raise ValueError(f"fusion layer {fusion_layer} outside [0, {cfg.depth}]")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.k = fusion_layer
        mk = lambda: EncoderBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng)  # noqa: E731
        if fusion_layer == 0:
            self.embed = PatchEmbed(cfg.embed, rng)
        else:
            self.embed_rgb = PatchEmbed(cfg.embed, rng)
            self.embed_tir = PatchEmbed(cfg.embed, rng)
            self.blocks_rgb = [mk() for _ in range(fusion_layer)]
            self.blocks_tir = [mk() for _ in range(fusion_layer)]
        self.shared = [mk() for _ in range(cfg.depth - fusion_layer)]
        self.norm = LayerNorm(cfg.dim)
        self.head = TrackHead(cfg.dim, rng)
        self.iou_head = IouPredictor(cfg.dim, rng)
        self.n_search = cfg.grid ** 2

    def _embed(self, emb: PatchEmbed, search, template) -> Tensor:
        return ops.concat([emb.tokens(search, "search"), emb.tokens(template, "template")], axis=1)

    def streams(self, s_rgb, s_tir, t_rgb, t_tir):
        """Pre-fusion per-layer tokens for each stream (empty lists when k = 0)."""
        if self.k == 0:
            return [], []
        a = self._embed(self.embed_rgb, s_rgb, t_rgb)
        b = self._embed(self.embed_tir, s_tir, t_tir)
        la, lb = [], []
        for ba, bb in zip(self.blocks_rgb, self.blocks_tir):
            a, b = ba(a), bb(b)
            la.append(a)
            lb.append(b)
        return la, lb

    def _shared(self, x: Tensor) -> Tensor:
        for blk in self.shared:
            x = blk(x)
        return self.norm(x)

    def forward(self, s_rgb, s_tir, t_rgb, t_tir) -> HeadTensors:
        if self.k == 0:
            s = ops.scale(ops.add(s_rgb, s_tir), 0.5)
            t = ops.scale(ops.add(t_rgb, t_tir), 0.5)
            x = self._embed(self.embed, s, t)
        else:
            la, lb = self.streams(s_rgb, s_tir, t_rgb, t_tir)
            x = ops.scale(ops.add(la[-1], lb[-1]), 0.5)
        x = self._shared(x)
        st = x[:, :self.n_search]
        logits, offsets, sizes = self.head(st)
        iou = self.iou_head(ops.mean(st.detach(), axis=1))
        return HeadTensors(logits, offsets, sizes, iou, self.cfg.grid)

    def final_features(self, s_rgb, s_tir, t_rgb, t_tir) -> Tuple[np.ndarray, np.ndarray]:
        """Final-layer tokens of each modality when it is propagated alone past
        the fusion point (the pre-fusion populations carried to the last layer)."""
        with no_grad():
            if self.k == 0:
                fa = self._shared(self._embed(self.embed, s_rgb, t_rgb))
                fb = self._shared(self._embed(self.embed, s_tir, t_tir))
            else:
                la, lb = self.streams(s_rgb, s_tir, t_rgb, t_tir)
                fa, fb = self._shared(la[-1]), self._shared(lb[-1])
        return fa.data, fb.data


def layerwise_gap(model: FusionLocationTracker, batches, kind: str = "biased") -> MmdReport:
    """MMD^2 between frame-mean pooled RGB- and TIR-stream tokens.

    ``batches`` yields ``(s_rgb, s_tir, t_rgb, t_tir)`` arrays.  Layers after
    the fusion point hold a single stream and report 0.
    """
    depth = model.cfg.depth
    pooled_a = [[] for _ in range(depth)]
    pooled_b = [[] for _ in range(depth)]
    final_a, final_b = [], []
    for s_rgb, s_tir, t_rgb, t_tir in batches:
        with no_grad():
            la, lb = model.streams(s_rgb, s_tir, t_rgb, t_tir)
        for i, (a, b) in enumerate(zip(la, lb)):
            pooled_a[i].append(a.data.mean(axis=1))
            pooled_b[i].append(b.data.mean(axis=1))
        fa, fb = model.final_features(s_rgb, s_tir, t_rgb, t_tir)
        final_a.append(fa.mean(axis=1))
        final_b.append(fb.mean(axis=1))
    layer_vals, bws = [], []
    for i in range(depth):
        if i < model.k:
            xa, xb = np.concatenate(pooled_a[i]), np.concatenate(pooled_b[i])
            bw = median_bandwidth(np.concatenate([xa, xb]))
            layer_vals.append(mmd2(xa, xb, bw, kind))
            bws.append(bw)
        else:
            layer_vals.append(0.0)
    xa, xb = np.concatenate(final_a), np.concatenate(final_b)
    bw = median_bandwidth(np.concatenate([xa, xb]))
    bws.append(bw)
    return MmdReport(model.k, layer_vals, mmd2(xa, xb, bw, kind), bws, kind)
