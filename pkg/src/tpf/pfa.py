"""Pixel-level fusion adapter: aligned RGB/TIR pair -> one fused image.

Pipeline::

    rgb --conv s2--> tokens --ViM(8)--+                 +--> ViM(16) --> conv --> shuffle --> sigmoid
                                      +-swap-+-tokcat-ViM(8)-split-chcat
    tir --conv s2--> tokens --ViM(8)--+

The parameter-free channel swap exchanges the first half of the channels of
the two modality streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .autograd import ops
from .autograd.nn import Conv2d, Module
from .autograd.tensor import ShapeError, Tensor
from .ssm import VimBlock, VimBlockConfig, block_flops

MODALITIES = ("rgb", "tir")


@dataclass(frozen=True)
class PfaConfig:
    stage_dims: Tuple[int, int, int] = (8, 8, 16)
    in_channels: int = 3
    extract_kernel: int = 3
    extract_stride: int = 2
    decode_kernel: int = 3
    d_state: int = 8
    expand: int = 2
    d_conv: int = 4
    swap: str = "first_half"  # or "even"

    def block_cfg(self, d: int) -> VimBlockConfig:
        return VimBlockConfig(d_model=d, d_state=self.d_state, expand=self.expand, d_conv=self.d_conv)

    def grid(self, h: int, w: int) -> Tuple[int, int]:
        return h // self.extract_stride, w // self.extract_stride


@dataclass
class FusedImage:
    data: np.ndarray
    provenance: str = "pfa"

    @property
    def shape(self):
        return self.data.shape


def channel_swap(a: Tensor, b: Tensor, pattern: str = "first_half") -> Tuple[Tensor, Tensor]:
    """Exchange half of the channels (last axis) between two token streams."""
    if a.shape != b.shape:
        raise ShapeError(f"channel_swap shape mismatch: {a.shape} vs {b.shape}")
    d = a.shape[-1]
    if d % 2:
        raise ValueError(f"channel_swap needs an even channel count, got {d}")
    h = d // 2
    if pattern == "first_half":
        a_lo, a_hi = ops.split(a, [h, h], axis=-1)
        b_lo, b_hi = ops.split(b, [h, h], axis=-1)
        return ops.concat([b_lo, a_hi], axis=-1), ops.concat([a_lo, b_hi], axis=-1)
    if pattern == "even":
        swap = np.zeros(d, dtype=bool)
        swap[::2] = True
        m = Tensor(swap.astype(np.float64))
        keep = Tensor((~swap).astype(np.float64))
        return (ops.add(ops.mul(a, keep), ops.mul(b, m)),
                ops.add(ops.mul(b, keep), ops.mul(a, m)))
    raise ValueError(f"unknown swap pattern {pattern!r}")


def _to_tokens(fmap: Tensor) -> Tensor:
    n, c, h, w = fmap.shape
    return ops.transpose(ops.reshape(fmap, (n, c, h * w)), (0, 2, 1))


def _to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    n, L, c = tokens.shape
    return ops.reshape(ops.transpose(tokens, (0, 2, 1)), (n, c, h, w))


class PFA(Module):
    def __init__(self, cfg: PfaConfig = PfaConfig(), rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        d0, d1, d2 = cfg.stage_dims
        if d1 * 2 != d2:
            raise ValueError(f"stage dims must satisfy 2*d1 == d2, got {cfg.stage_dims}")
        k, s = cfg.extract_kernel, cfg.extract_stride
        self.extract_rgb = Conv2d(cfg.in_channels, d0, k, rng, stride=s, padding=k // 2)
        self.extract_tir = Conv2d(cfg.in_channels, d0, k, rng, stride=s, padding=k // 2)
        self.block_rgb = VimBlock(cfg.block_cfg(d0), rng)
        self.block_tir = VimBlock(cfg.block_cfg(d0), rng)
        self.block_tokens = VimBlock(cfg.block_cfg(d1), rng)
        self.block_channels = VimBlock(cfg.block_cfg(d2), rng)
        kd = cfg.decode_kernel
        self.decode = Conv2d(d2, cfg.in_channels * s * s, kd, rng, padding=kd // 2)

    def low_level_extract(self, img: Tensor, modality: str) -> Tensor:
        """Strided conv then flatten: (N, C, H, W) -> (N, (H/s)(W/s), d0)."""
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
        if not np.all(np.isfinite(img.data)):
            raise ValueError("low_level_extract: non-finite input")
        conv = self.extract_rgb if modality == "rgb" else self.extract_tir
        return _to_tokens(conv(img))

    def forward(self, rgb, tir) -> Tensor:
        rgb, tir = _batched(rgb), _batched(tir)
        if rgb.shape != tir.shape:
            raise ShapeError(f"modality shapes differ: rgb {rgb.shape} vs tir {tir.shape}")
        n, c, H, W = rgb.shape
        s = self.cfg.extract_stride
        if H % s or W % s:
            raise ShapeError(f"image sides {H}x{W} not divisible by extract stride {s}")
        h, w = H // s, W // s
        a = self.block_rgb(self.low_level_extract(rgb, "rgb"))
        b = self.block_tir(self.low_level_extract(tir, "tir"))
        a, b = channel_swap(a, b, self.cfg.swap)
        L = h * w
        t = self.block_tokens(ops.concat([a, b], axis=1))
        ta, tb = ops.split(t, [L, L], axis=1)
        f = self.block_channels(ops.concat([ta, tb], axis=-1))
        out = ops.pixel_shuffle(self.decode(_to_map(f, h, w)), s)
        return ops.sigmoid(out)


def _batched(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape)
    return x


def fuse(rgb, tir, model: PFA) -> FusedImage:
    """Unbatched convenience wrapper returning a :class:`FusedImage`."""
    out = model(rgb, tir)
    data = out.data[0] if np.ndim(rgb) == 3 or (isinstance(rgb, Tensor) and rgb.ndim == 3) else out.data
    return FusedImage(data, provenance="pfa")


def param_count(cfg: PfaConfig = PfaConfig()) -> int:
    return PFA(cfg, np.random.default_rng(0)).num_parameters()


def flop_count(cfg: PfaConfig, H: int, W: int) -> int:
    """2 x multiply-accumulates of one forward pass at H x W."""
    s, k = cfg.extract_stride, cfg.extract_kernel
    h, w = H // s, W // s
    L = h * w
    d0, d1, d2 = cfg.stage_dims
    extract = 2 * 2 * (cfg.in_channels * k * k * d0) * L
    blocks = (block_flops(cfg.block_cfg(d0), L) * 2
              + block_flops(cfg.block_cfg(d1), 2 * L)
              + block_flops(cfg.block_cfg(d2), L))
    kd = cfg.decode_kernel
    decode = 2 * (d2 * kd * kd * cfg.in_channels * s * s) * L
    return int(extract + blocks + decode)
