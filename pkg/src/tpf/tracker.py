"""Desk-scale one-stream transformer tracker.

Search and template crops are cut into p x p patches, linearly embedded, given
learnable position embeddings (one table per role) and concatenated as
``[search | template | dyn_template]``.  A stack of pre-norm attention blocks
encodes the joint sequence and a per-token head scores each search cell and
regresses a box relative to it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .autograd import ops
from .autograd.nn import LayerNorm, Linear, Module, Parameter
from .autograd.tensor import ShapeError, Tensor, as_tensor

ROLES = ("search", "template", "dyn_template")


@dataclass(frozen=True)
class PatchEmbedConfig:
    patch: int = 8
    dim: int = 64
    search_size: int = 64
    template_size: int = 32
    in_channels: int = 3

    @property
    def search_grid(self) -> int:
        return self.search_size // self.patch

    @property
    def template_grid(self) -> int:
        return self.template_size // self.patch


@dataclass(frozen=True)
class TrackerConfig:
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    search_size: int = 64
    template_size: int = 32

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"embed dim {self.dim} not divisible by {self.heads} heads")
        for side in (self.search_size, self.template_size):
            if side % self.patch:
                raise ValueError(f"crop side {side} not divisible by patch {self.patch}")

    @property
    def embed(self) -> PatchEmbedConfig:
        return PatchEmbedConfig(self.patch, self.dim, self.search_size, self.template_size)

    @property
    def grid(self) -> int:
        return self.search_size // self.patch


class BBox(NamedTuple):
    """Normalised search-region box."""
    cx: float
    cy: float
    w: float
    h: float


ROLE_ORDER = ("search", "template", "dyn_template")


@dataclass(frozen=True)
class TokenSequence:
    tokens: Tensor  # (N, L, d)
    roles: Tuple[str, ...]

    def __post_init__(self):
        if len(self.roles) != self.tokens.shape[-2]:
            raise ShapeError(f"{len(self.roles)} roles for {self.tokens.shape[-2]} tokens")
        ranks = [ROLE_ORDER.index(r) for r in self.roles]
        if any(b < a for a, b in zip(ranks, ranks[1:])):
            raise ValueError("token roles must be contiguous in the order search | template | dyn_template")

    def span(self, role: str) -> Tuple[int, int]:
        idx = [i for i, r in enumerate(self.roles) if r == role]
        if not idx:
            raise KeyError(role)
        return idx[0], idx[-1] + 1

    def part(self, role: str) -> Tensor:
        s, e = self.span(role)
        return self.tokens[:, s:e]

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.roles)


class HeadTensors(NamedTuple):
    """Batched, differentiable head outputs over the G*G search cells."""
    logits: Tensor   # (N, G*G)
    offsets: Tensor  # (N, G*G, 2) in-cell centre offset in [0, 1]
    sizes: Tensor    # (N, G*G, 2) normalised w, h
    iou: Tensor      # (N,)
    grid: int


@dataclass
class TrackHeadOutput:
    score_map: np.ndarray  # (G, G)
    box: BBox
    iou_estimate: float

    @property
    def score(self) -> float:
        return float(self.score_map.max())


def patchify(img: Tensor, p: int) -> Tensor:
    """(N, C, H, W) -> (N, (H/p)(W/p), C*p*p), row-major over patches."""
    n, c, h, w = img.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    x = ops.reshape(img, (n, c, h // p, p, w // p, p))
    x = ops.transpose(x, (0, 2, 4, 1, 3, 5))
    return ops.reshape(x, (n, (h // p) * (w // p), c * p * p))


def unpatchify(tokens: Tensor, p: int, c: int, gh: int, gw: int) -> Tensor:
    n = tokens.shape[0]
    x = ops.reshape(tokens, (n, gh, gw, c, p, p))
    x = ops.transpose(x, (0, 3, 1, 4, 2, 5))
    return ops.reshape(x, (n, c, gh * p, gw * p))


def _batched(x) -> Tensor:
    x = as_tensor(x)
    return ops.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


class PatchEmbed(Module):
    def __init__(self, cfg: PatchEmbedConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = Linear(cfg.in_channels * cfg.patch ** 2, cfg.dim, rng)
        gs, gt = cfg.search_grid ** 2, cfg.template_grid ** 2
        self.pos_search = Parameter(rng.normal(0.0, 0.02, size=(gs, cfg.dim)))
        self.pos_template = Parameter(rng.normal(0.0, 0.02, size=(gt, cfg.dim)))
        self.pos_dyn = Parameter(rng.normal(0.0, 0.02, size=(gt, cfg.dim)))

    def tokens(self, img, role: str) -> Tensor:
        img = _batched(img)
        pos = {"search": self.pos_search, "template": self.pos_template,
               "dyn_template": self.pos_dyn}[role]
        t = self.proj(patchify(img, self.cfg.patch))
        if t.shape[1] != pos.shape[0]:
            raise ShapeError(f"{role} crop gives {t.shape[1]} tokens, expected {pos.shape[0]}")
        return ops.add(t, pos)

    def forward(self, search, templates: Sequence) -> TokenSequence:
        parts = [self.tokens(search, "search")]
        roles = ["search"] * parts[0].shape[1]
        for i, tpl in enumerate(templates):
            role = "template" if i == 0 else "dyn_template"
            parts.append(self.tokens(tpl, role))
            roles += [role] * parts[-1].shape[1]
        return TokenSequence(ops.concat(parts, axis=1), tuple(roles))


def patch_embed(img, embed: PatchEmbed, role: str = "search") -> TokenSequence:
    t = embed.tokens(img, role)
    return TokenSequence(t, (role,) * t.shape[1])


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng, init_scale=0.5 / np.sqrt(dim))

    def forward(self, x: Tensor) -> Tensor:
        n, L, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = ops.transpose(ops.reshape(self.qkv(x), (n, L, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ops.softmax(ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh)), axis=-1)
        out = ops.reshape(ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)), (n, L, d))
        return self.proj(out)


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, init_scale=0.5 / np.sqrt(dim * mlp_ratio))

    def forward(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attn(self.norm1(x)))
        return ops.add(x, self.fc2(ops.gelu(self.fc1(self.norm2(x)))))


class Encoder(Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: int, rng):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.blocks = [EncoderBlock(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor, return_layers: bool = False):
        layers = []
        for blk in self.blocks:
            x = blk(x)
            layers.append(x)
        out = self.norm(x)
        return (out, layers) if return_layers else out


def encode(seq: TokenSequence, encoder: Encoder) -> TokenSequence:
    return seq.with_tokens(encoder(seq.tokens))


class TrackHead(Module):
    """Per-cell MLP: score logit, centre offset (2) and size (2)."""

    def __init__(self, dim: int, rng):
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(dim, dim, rng)
        self.out = Linear(dim, 5, rng, init_scale=0.1 / np.sqrt(dim))
        self.out.bias.data[0] = -2.0

    def forward(self, search_tokens: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        raw = self.out(ops.gelu(self.fc1(self.norm(search_tokens))))
        return raw[..., 0], ops.sigmoid(raw[..., 1:3]), ops.sigmoid(raw[..., 3:5])


class IouPredictor(Module):
    """Pooled search tokens -> estimated IoU of the predicted box."""

    def __init__(self, dim: int, rng):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, 1, rng, init_scale=0.1 / np.sqrt(dim))

    def forward(self, pooled: Tensor) -> Tensor:
        return ops.sigmoid(ops.reshape(self.fc2(ops.relu(self.fc1(pooled))), (pooled.shape[0],)))


def decode_boxes(head: HeadTensors) -> Tuple[np.ndarray, np.ndarray]:
    """Box at the argmax cell of each item: returns ((N, 4) cx,cy,w,h, (N,) peak score).

    Ties resolve to the lowest flat index (``np.argmax`` semantics).
    """
    g = head.grid
    logits = head.logits.data
    k = np.argmax(logits, axis=1)
    rows = np.arange(logits.shape[0])
    off = head.offsets.data[rows, k]
    size = head.sizes.data[rows, k]
    cx = (k % g + off[:, 0]) / g
    cy = (k // g + off[:, 1]) / g
    score = 1.0 / (1.0 + np.exp(-logits[rows, k]))
    return np.stack([cx, cy, size[:, 0], size[:, 1]], axis=1), score


def head_output(head: HeadTensors, i: int = 0) -> TrackHeadOutput:
    boxes, _ = decode_boxes(head)
    g = head.grid
    score_map = (1.0 / (1.0 + np.exp(-head.logits.data[i]))).reshape(g, g)
    return TrackHeadOutput(score_map, BBox(*map(float, boxes[i])), float(head.iou.data[i]))


class Tracker(Module):
    def __init__(self, cfg: TrackerConfig = TrackerConfig(), rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.embed, rng)
        self.encoder = Encoder(cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio, rng)
        self.head = TrackHead(cfg.dim, rng)
        self.iou_head = IouPredictor(cfg.dim, rng)

    def features(self, search, templates: Sequence) -> TokenSequence:
        """Encoded joint sequence (after the final norm)."""
        return encode(self.embed(search, templates), self.encoder)

    def predict(self, seq: TokenSequence) -> HeadTensors:
        s = seq.part("search")
        logits, offsets, sizes = self.head(s)
        iou = self.iou_head(ops.mean(s.detach(), axis=1))
        return HeadTensors(logits, offsets, sizes, iou, self.cfg.grid)

    def forward(self, search, templates: Sequence) -> Tuple[HeadTensors, TokenSequence]:
        seq = self.features(search, templates)
        return self.predict(seq), seq


def head(search_tokens: Tensor, tracker: Tracker) -> TrackHeadOutput:
    """Head of a single sequence of search tokens (L == G*G)."""
    s = search_tokens if search_tokens.ndim == 3 else ops.reshape(search_tokens, (1,) + search_tokens.shape)
    logits, offsets, sizes = tracker.head(s)
    iou = tracker.iou_head(ops.mean(s.detach(), axis=1))
    return head_output(HeadTensors(logits, offsets, sizes, iou, tracker.cfg.grid))
