"""Deterministic synthetic RGB-thermal sequences.

Each sequence has a static textured background per modality, one target
moving along a parametric trajectory, optional distractors that are visible
in a single modality, and degradation windows:

* ``low_light``: RGB frame scaled by ``low_light_gain`` (frame mean < 0.15)
* ``crossover``: TIR target intensity set to its local background mean
* ``occlusion``: an occluder covers the target in both modalities
* ``appearance``: target switches to an alternate colour / temperature / shape

Frames are a pure function of ``(spec, frame_idx)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, zoom

from .imageio import read_pnm, write_pnm
from .prng import Xoshiro256

Window = Tuple[int, int]
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class SequenceSpec:
    length: int = 100
    canvas: Tuple[int, int] = (128, 128)
    target_shape: str = "ellipse"
    target_size: Tuple[float, float] = (18.0, 14.0)
    trajectory: str = "sinusoidal"
    start: Optional[Tuple[float, float]] = None
    velocity: Tuple[float, float] = (0.9, 0.6)
    amplitude: Tuple[float, float] = (36.0, 30.0)
    period: Tuple[float, float] = (90.0, 70.0)
    scale_amp: float = 0.15
    target_rgb: Tuple[float, float, float] = (0.98, 0.92, 0.55)
    target_temp: float = 0.92
    alt_rgb: Tuple[float, float, float] = (0.25, 0.85, 0.95)
    alt_temp: float = 0.75
    alt_shape: str = "rect"
    n_rgb_distractors: int = 0
    n_tir_distractors: int = 0
    low_light: List[Window] = field(default_factory=list)
    low_light_gain: float = 0.22
    blur_sigma: float = 0.0
    occlusion: List[Window] = field(default_factory=list)
    crossover: List[Window] = field(default_factory=list)
    appearance: List[Window] = field(default_factory=list)
    tir_noise: float = 0.02
    rgb_noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("canvas", "target_size", "velocity", "amplitude", "period", "target_rgb", "alt_rgb"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.start is not None:
            self.start = tuple(self.start)
        for name in ("low_light", "occlusion", "crossover", "appearance"):
            wins = [tuple(w) for w in getattr(self, name)]
            for s, e in wins:
                if not (0 <= s < e <= self.length):
                    raise ValueError(f"{name} window {(s, e)} outside [0, {self.length})")
            setattr(self, name, wins)
        if self.target_shape not in ("ellipse", "rect") or self.alt_shape not in ("ellipse", "rect"):
            raise ValueError("target shapes must be 'ellipse' or 'rect'")
        if self.trajectory not in ("linear", "sinusoidal"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SequenceSpec":
        return cls(**json.loads(text))


class GtRecord(NamedTuple):
    frame_idx: int
    box: Tuple[float, float, float, float]  # x, y, w, h in pixels
    visible: bool


class RgbtFrame(NamedTuple):
    rgb: np.ndarray  # (3, H, W)
    tir: np.ndarray  # (3, H, W), replicated thermal channel
    gt: GtRecord


def in_windows(idx: int, windows: Sequence[Window]) -> bool:
    return any(s <= idx < e for s, e in windows)


def _smooth_field(rng: Xoshiro256, shape, coarse: int, lo: float, hi: float) -> np.ndarray:
    h, w = shape
    grid = rng.uniform(lo, hi, size=(coarse + 1, coarse + 1))
    up = zoom(grid, ((h + 8) / (coarse + 1), (w + 8) / (coarse + 1)), order=3, mode="nearest")
    return np.clip(up[4:4 + h, 4:4 + w], lo, hi)


def _triangle(x: float, lo: float, hi: float) -> float:
    span = hi - lo
    if span <= 0:
        return lo
    r = (x - lo) % (2 * span)
    return lo + (r if r <= span else 2 * span - r)


class _Track:
    """Parametric path for the target or a distractor."""

    def __init__(self, kind, start, velocity, amplitude, period, phase, canvas, margin):
        self.kind, self.start, self.velocity = kind, start, velocity
        self.amplitude, self.period, self.phase = amplitude, period, phase
        self.h, self.w = canvas
        self.margin = margin

    def center(self, t: float) -> Tuple[float, float]:
        mx, my = self.margin
        if self.kind == "linear":
            x = _triangle(self.start[0] + self.velocity[0] * t, mx, self.w - mx)
            y = _triangle(self.start[1] + self.velocity[1] * t, my, self.h - my)
        else:
            x = self.start[0] + self.amplitude[0] * np.sin(2 * np.pi * t / self.period[0] + self.phase[0])
            y = self.start[1] + self.amplitude[1] * np.sin(2 * np.pi * t / self.period[1] + self.phase[1])
            x = float(np.clip(x, mx, self.w - mx))
            y = float(np.clip(y, my, self.h - my))
        return float(x), float(y)


def _coverage(shape: str, cx, cy, w, h, canvas, ss: int = 4) -> np.ndarray:
    """Anti-aliased occupancy in [0, 1] by ss x ss supersampling."""
    H, W = canvas
    x0, x1 = max(int(np.floor(cx - w / 2)) - 1, 0), min(int(np.ceil(cx + w / 2)) + 1, W)
    y0, y1 = max(int(np.floor(cy - h / 2)) - 1, 0), min(int(np.ceil(cy + h / 2)) + 1, H)
    cov = np.zeros(canvas)
    if x1 <= x0 or y1 <= y0:
        return cov
    offs = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(y0, y1)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(x0, x1)[:, None] + offs[None, :]).reshape(-1)
    dx = (xs[None, :] - cx) / (w / 2)
    dy = (ys[:, None] - cy) / (h / 2)
    if shape == "ellipse":
        inside = dx ** 2 + dy ** 2 <= 1.0
    else:
        inside = (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)
    cov[y0:y1, x0:x1] = inside.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    return cov


class SequenceRenderer:
    """Holds per-sequence static state (backgrounds, paths); renders frames on demand."""

    def __init__(self, spec: SequenceSpec):
        self.spec = spec
        H, W = spec.canvas
        rng = Xoshiro256.derive(spec.seed, 0)
        base = np.stack([_smooth_field(rng, (H, W), 6, 0.06, 0.30) for _ in range(3)])
        fine = rng.uniform(-0.04, 0.04, size=(3, H, W))
        self.bg_rgb = np.clip(base + fine, 0.0, 1.0)
        self.bg_tir = np.clip(_smooth_field(rng, (H, W), 5, 0.10, 0.38)
                              + rng.uniform(-0.02, 0.02, size=(H, W)), 0.0, 1.0)
        tw, th = spec.target_size
        margin = (tw * (1 + spec.scale_amp) / 2 + 2, th * (1 + spec.scale_amp) / 2 + 2)
        start = spec.start if spec.start is not None else (
            rng.uniform(W * 0.35, W * 0.65), rng.uniform(H * 0.35, H * 0.65))
        phase = (rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi))
        self.track = _Track(spec.trajectory, start, spec.velocity, spec.amplitude, spec.period,
                            phase, (H, W), margin)
        self.distractors = []
        for kind in ["rgb"] * spec.n_rgb_distractors + ["tir"] * spec.n_tir_distractors:
            dstart = (rng.uniform(0.2 * W, 0.8 * W), rng.uniform(0.2 * H, 0.8 * H))
            dvel = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0))
            size = (tw * rng.uniform(0.8, 1.2), th * rng.uniform(0.8, 1.2))
            dtrack = _Track("linear", dstart, dvel, (0, 0), (1, 1), (0, 0), (H, W),
                            (size[0] / 2 + 2, size[1] / 2 + 2))
            self.distractors.append((kind, dtrack, size))

    def target_box(self, idx: int) -> Tuple[float, float, float, float]:
        s = self.spec
        cx, cy = self.track.center(idx)
        k = 1.0 + s.scale_amp * np.sin(2 * np.pi * idx / 120.0)
        w, h = s.target_size[0] * k, s.target_size[1] * k
        return (cx - w / 2, cy - h / 2, w, h)

    def render(self, idx: int) -> RgbtFrame:
        s = self.spec
        H, W = s.canvas
        rng = Xoshiro256.derive(s.seed, 1, idx)
        rgb = self.bg_rgb.copy()
        tir = self.bg_tir.copy()

        for kind, dtrack, (dw, dh) in self.distractors:
            dcx, dcy = dtrack.center(idx)
            cov = _coverage(s.target_shape, dcx, dcy, dw, dh, (H, W))
            if kind == "rgb":
                col = np.asarray(s.target_rgb)[:, None, None]
                rgb = rgb * (1 - cov) + col * cov
            else:
                tir = tir * (1 - cov) + s.target_temp * cov

        appear = in_windows(idx, s.appearance)
        shape = s.alt_shape if appear else s.target_shape
        color = np.asarray(s.alt_rgb if appear else s.target_rgb)[:, None, None]
        temp = s.alt_temp if appear else s.target_temp
        x, y, w, h = self.target_box(idx)
        cx, cy = x + w / 2, y + h / 2
        cov = _coverage(shape, cx, cy, w, h, (H, W))
        if in_windows(idx, s.crossover):
            ring = _ring_mask(cov, (x, y, w, h), (H, W))
            temp = float(tir[ring].mean()) if ring.any() else float(tir.mean())
        rgb = rgb * (1 - cov) + color * cov
        tir = tir * (1 - cov) + temp * cov

        visible = True
        if in_windows(idx, s.occlusion):
            ow, oh = w * 1.6, h * 1.6
            occ = _coverage("rect", cx, cy, ow, oh, (H, W))
            rgb = rgb * (1 - occ) + 0.45 * occ
            tir = tir * (1 - occ) + float(self.bg_tir.mean()) * occ
            visible = False

        if s.blur_sigma > 0:
            rgb = gaussian_filter(rgb, sigma=(0, s.blur_sigma, s.blur_sigma))
        if in_windows(idx, s.low_light):
            rgb = rgb * s.low_light_gain
        if s.rgb_noise > 0:
            rgb = rgb + rng.normal(0.0, s.rgb_noise, size=rgb.shape)
        if s.tir_noise > 0:
            tir = tir + rng.normal(0.0, s.tir_noise, size=tir.shape)
        rgb = np.clip(rgb, 0.0, 1.0)
        tir = np.clip(tir, 0.0, 1.0)
        gt = GtRecord(idx, (x, y, w, h), visible)
        return RgbtFrame(rgb, np.repeat(tir[None], 3, axis=0), gt)


def _ring_mask(cov: np.ndarray, box, canvas, pad: float = 0.5) -> np.ndarray:
    x, y, w, h = box
    H, W = canvas
    x0, x1 = int(max(np.floor(x - pad * w), 0)), int(min(np.ceil(x + w + pad * w), W))
    y0, y1 = int(max(np.floor(y - pad * h), 0)), int(min(np.ceil(y + h + pad * h), H))
    ring = np.zeros(canvas, dtype=bool)
    ring[y0:y1, x0:x1] = True
    return ring & (cov == 0)


def target_contrast(img: np.ndarray, box, shape: str = "ellipse") -> float:
    """|mean(target) - mean(surrounding ring)| on luminance (or the thermal plane)."""
    if img.ndim == 3:
        plane = img[0] if np.array_equal(img[0], img[-1]) and np.array_equal(img[0], img[1]) else \
            np.tensordot(_LUMA, img, axes=([0], [0]))
    else:
        plane = img
    canvas = plane.shape
    x, y, w, h = box
    cov = _coverage(shape, x + w / 2, y + h / 2, w, h, canvas)
    inner = cov >= 0.99
    ring = _ring_mask(cov, box, canvas)
    if not inner.any() or not ring.any():
        return 0.0
    return float(abs(plane[inner].mean() - plane[ring].mean()))


def generate(spec: SequenceSpec) -> Iterator[RgbtFrame]:
    renderer = SequenceRenderer(spec)
    for idx in range(spec.length):
        yield renderer.render(idx)


# ------------------------------------------------------------------ cropping
@dataclass(frozen=True)
class CropTransform:
    """Square crop of side ``side`` centred at (cx, cy), resampled to ``out`` px."""
    cx: float
    cy: float
    side: float
    out: int

    def to_crop(self, box) -> np.ndarray:
        """Image-space (x, y, w, h) -> normalised crop (cx, cy, w, h)."""
        x, y, w, h = box
        x0, y0 = self.cx - self.side / 2, self.cy - self.side / 2
        return np.array([(x + w / 2 - x0) / self.side, (y + h / 2 - y0) / self.side,
                         w / self.side, h / self.side])

    def to_image(self, nbox) -> np.ndarray:
        ncx, ncy, nw, nh = nbox
        x0, y0 = self.cx - self.side / 2, self.cy - self.side / 2
        w, h = nw * self.side, nh * self.side
        return np.array([x0 + ncx * self.side - w / 2, y0 + ncy * self.side - h / 2, w, h])


def crop_region(img: np.ndarray, cx: float, cy: float, side: float, out: int) -> Tuple[np.ndarray, CropTransform]:
    """Bilinear crop with edge replication outside the canvas."""
    step = side / out
    coords = cy - side / 2 + (np.arange(out) + 0.5) * step - 0.5
    xs = cx - side / 2 + (np.arange(out) + 0.5) * step - 0.5
    yy, xx = np.meshgrid(coords, xs, indexing="ij")
    crop = np.stack([map_coordinates(ch, [yy, xx], order=1, mode="nearest") for ch in img])
    return crop, CropTransform(cx, cy, side, out)


def crop_for_box(img: np.ndarray, box, factor: float, out: int, jitter=(0.0, 0.0, 0.0)):
    x, y, w, h = box
    side = float(np.sqrt(w * h)) * factor * float(np.exp(jitter[2]))
    cx = x + w / 2 + jitter[0] * side
    cy = y + h / 2 + jitter[1] * side
    return crop_region(img, cx, cy, side, out)


def crop_search_and_template(frame: RgbtFrame, box, search_factor: float = 4.0,
                             template_factor: float = 2.0, search_size: int = 64,
                             template_size: int = 32):
    """Search and template crops of both modalities around ``box``.

    Returns ``((rgb_s, tir_s, tf_s), (rgb_t, tir_t, tf_t))``.
    """
    rs, tfs = crop_for_box(frame.rgb, box, search_factor, search_size)
    ts, _ = crop_for_box(frame.tir, box, search_factor, search_size)
    rt, tft = crop_for_box(frame.rgb, box, template_factor, template_size)
    tt, _ = crop_for_box(frame.tir, box, template_factor, template_size)
    return (rs, ts, tfs), (rt, tt, tft)


# ----------------------------------------------------------------- disk I/O
def write_sequence(spec: SequenceSpec, directory) -> Path:
    d = Path(directory)
    (d / "rgb").mkdir(parents=True, exist_ok=True)
    (d / "tir").mkdir(parents=True, exist_ok=True)
    (d / "spec.json").write_text(spec.to_json())
    with open(d / "gt.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_idx", "x", "y", "w", "h", "visible"])
        for frame in generate(spec):
            i = frame.gt.frame_idx
            write_pnm(d / "rgb" / f"{i:06d}.ppm", frame.rgb)
            write_pnm(d / "tir" / f"{i:06d}.pgm", frame.tir[:1])
            x, y, bw, bh = frame.gt.box
            w.writerow([i, f"{x:.4f}", f"{y:.4f}", f"{bw:.4f}", f"{bh:.4f}", int(frame.gt.visible)])
    return d


def read_gt(directory) -> List[GtRecord]:
    out = []
    with open(Path(directory) / "gt.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(GtRecord(int(row["frame_idx"]),
                                (float(row["x"]), float(row["y"]), float(row["w"]), float(row["h"])),
                                bool(int(row["visible"]))))
    return out


def read_sequence(directory) -> List[RgbtFrame]:
    d = Path(directory)
    frames = []
    for gt in read_gt(d):
        rgb_p = d / "rgb" / f"{gt.frame_idx:06d}.ppm"
        tir_p = d / "tir" / f"{gt.frame_idx:06d}.pgm"
        if not rgb_p.exists() or not tir_p.exists():
            raise FileNotFoundError(f"{d}: missing frame {gt.frame_idx}")
        tir = read_pnm(tir_p)
        frames.append(RgbtFrame(read_pnm(rgb_p), np.repeat(tir[:1], 3, axis=0), gt))
    return frames
