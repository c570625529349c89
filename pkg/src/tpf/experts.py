"""Built-in fusion experts used as distillation teachers.

Three deliberately different classical fusers stand in for learned expert
models: a linear blend, a per-pixel selection, and a multi-scale blend.  An
:class:`ExternalExpert` reads pre-computed fused frames from disk so outputs of
any real fusion network can be dropped in.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
from scipy.ndimage import convolve1d

from .imageio import read_pnm
from .pfa import FusedImage

LUMA = np.array([0.299, 0.587, 0.114])
_GAUSS5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _check_pair(rgb: np.ndarray, tir: np.ndarray) -> None:
    if rgb.shape != tir.shape:
        raise ValueError(f"expert inputs differ in shape: {rgb.shape} vs {tir.shape}")


def luminance(img: np.ndarray) -> np.ndarray:
    """(3, H, W) -> (H, W); single-channel images are returned as is."""
    if img.shape[-3] == 1:
        return img[..., 0, :, :]
    return np.tensordot(LUMA, img, axes=([0], [-3]))


def average_expert(rgb: np.ndarray, tir: np.ndarray) -> FusedImage:
    _check_pair(rgb, tir)
    return FusedImage(0.5 * (rgb + tir), "average")


def max_expert(rgb: np.ndarray, tir: np.ndarray) -> FusedImage:
    """Copy, per pixel, whichever modality is brighter (ties go to RGB)."""
    _check_pair(rgb, tir)
    pick_rgb = luminance(rgb) >= luminance(tir)
    return FusedImage(np.where(pick_rgb[..., None, :, :], rgb, tir), "max")


def _blur(img: np.ndarray) -> np.ndarray:
    out = convolve1d(img, _GAUSS5, axis=-1, mode="reflect")
    return convolve1d(out, _GAUSS5, axis=-2, mode="reflect")


def _reduce(img: np.ndarray) -> np.ndarray:
    return _blur(img)[..., ::2, ::2]


def _expand(img: np.ndarray, shape) -> np.ndarray:
    up = np.zeros(img.shape[:-2] + tuple(shape[-2:]))
    up[..., ::2, ::2] = img
    return 4.0 * _blur(up)


def laplacian_pyramid(img: np.ndarray, levels: int) -> List[np.ndarray]:
    """Detail bands from fine to coarse followed by the residual base."""
    bands, cur = [], img
    for _ in range(levels):
        low = _reduce(cur)
        bands.append(cur - _expand(low, cur.shape))
        cur = low
    bands.append(cur)
    return bands


def collapse_pyramid(bands: List[np.ndarray]) -> np.ndarray:
    cur = bands[-1]
    for detail in reversed(bands[:-1]):
        cur = detail + _expand(cur, detail.shape)
    return cur


def blend_pyramids(pa: List[np.ndarray], pb: List[np.ndarray]) -> List[np.ndarray]:
    """Max-magnitude selection on detail bands, average on the base."""
    out = [np.where(np.abs(a) >= np.abs(b), a, b) for a, b in zip(pa[:-1], pb[:-1])]
    out.append(0.5 * (pa[-1] + pb[-1]))
    return out


def pyramid_expert(rgb: np.ndarray, tir: np.ndarray, levels: int = 3) -> FusedImage:
    _check_pair(rgb, tir)
    h, w = rgb.shape[-2:]
    if h % (2 ** levels) or w % (2 ** levels):
        raise ValueError(f"image sides {h}x{w} must be divisible by 2**levels={2 ** levels}")
    if levels == 0:
        return FusedImage(0.5 * (rgb + tir), "pyramid")
    fused = collapse_pyramid(blend_pyramids(laplacian_pyramid(rgb, levels),
                                            laplacian_pyramid(tir, levels)))
    return FusedImage(np.clip(fused, 0.0, 1.0), "pyramid")


@dataclass
class FusionExpert:
    id: str
    fn: Callable[..., FusedImage]

    def fuse(self, rgb: np.ndarray, tir: np.ndarray, frame_idx: Optional[int] = None,
             sequence: Optional[str] = None) -> FusedImage:
        out = self.fn(rgb, tir)
        return FusedImage(out.data, self.id)


class ExternalExpert:
    """Fused frames stored as ``<directory>/<frame_idx:06d>.ppm``.

    With several sequences, ``<directory>/<sequence name>/`` is used when it exists.
    """

    def __init__(self, id: str, directory):
        self.id = id
        self.directory = Path(directory)

    def path_for(self, frame_idx: int, sequence: Optional[str] = None) -> Path:
        d = self.directory
        if sequence and (d / sequence).is_dir():
            d = d / sequence
        return d / f"{frame_idx:06d}.ppm"

    def fuse(self, rgb: np.ndarray, tir: np.ndarray, frame_idx: Optional[int] = None,
             sequence: Optional[str] = None) -> FusedImage:
        if frame_idx is None:
            raise ValueError(f"external expert {self.id!r} needs a frame index")
        path = self.path_for(frame_idx, sequence)
        if not path.exists():
            raise FileNotFoundError(f"external expert {self.id!r}: missing output for frame {frame_idx} ({path})")
        img = read_pnm(path)
        if img.shape != rgb.shape:
            raise ValueError(f"external expert {self.id!r}: frame {frame_idx} has shape {img.shape}, expected {rgb.shape}")
        return FusedImage(img, self.id)


def builtin_experts(levels: int = 3) -> List[FusionExpert]:
    return [
        FusionExpert("average", average_expert),
        FusionExpert("max", max_expert),
        FusionExpert("pyramid", lambda r, t: pyramid_expert(r, t, levels)),
    ]
