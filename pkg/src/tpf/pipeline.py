"""Training, tracking and analysis runs behind the CLI commands.

Every run is a deterministic function of (config, seed): parameter init uses
``numpy.random.default_rng(seed + offset)`` and pair sampling uses
:class:`~tpf.prng.Xoshiro256` streams keyed by (seed, purpose, step).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import ops
from .autograd.nn import Module
from .autograd.optim import AdamW, clip_grad_norm
from .autograd.serialize import load_checkpoint, save_checkpoint
from .autograd.tensor import Tensor, no_grad
from .config import ConfigError, DataError, ExperimentConfig
from .experts import ExternalExpert, builtin_experts
from .gap import FusionLocationTracker, MmdReport, layerwise_gap
from .imageio import read_pnm, to_bytes, write_pnm
from .losses import (AdaptiveWeights, BranchFeatures, LossBreakdown, LossLog, ModalityDecoder,
                     adaptive_weights, distillation_loss, drf_total, one_hot_weights,
                     realized_iou, reconstruction_loss, repulsion_loss, task_loss)
from .metrics import EvalResult, compute_metrics
from .ndtu import NdtuState, current_templates, observe
from .pfa import PFA
from .plot import line_plot_svg, write_svg
from .prng import Xoshiro256
from .synth import CropTransform, SequenceRenderer, SequenceSpec, crop_region, write_sequence
from .tracker import Encoder, PatchEmbed, Tracker, TrackerConfig, decode_boxes

# stream keys for Xoshiro256.derive
_PRETRAIN, _DISTILL, _FINETUNE, _EVAL, _GAP = 11, 12, 13, 14, 15
_AUX_WARMUP = 16
EXPERT_KEYS = ("c", "d", "m")


# ------------------------------------------------------------------- data
class SequenceData:
    """One sequence held as uint8 frames (RGB (L,3,H,W), TIR (L,H,W)) plus gt."""

    def __init__(self, name: str, rgb: np.ndarray, tir: np.ndarray, boxes: np.ndarray,
                 visible: np.ndarray, frame_ids: np.ndarray, source: Optional[Path] = None):
        self.name, self.rgb_u8, self.tir_u8 = name, rgb, tir
        self.boxes, self.visible, self.frame_ids = boxes, visible, frame_ids
        self.source = source

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def canvas(self) -> Tuple[int, int]:
        return self.tir_u8.shape[1:]

    def rgb(self, i: int) -> np.ndarray:
        return self.rgb_u8[i].astype(np.float64) / 255.0

    def tir(self, i: int) -> np.ndarray:
        t = self.tir_u8[i].astype(np.float64) / 255.0
        return np.broadcast_to(t, (3,) + t.shape)

    @classmethod
    def from_spec(cls, spec: SequenceSpec, name: str = "synthetic") -> "SequenceData":
        """In-memory equivalent of writing the sequence to disk and reading it back."""
        r = SequenceRenderer(spec)
        rgb, tir, boxes, vis = [], [], [], []
        for i in range(spec.length):
            f = r.render(i)
            rgb.append(to_bytes(f.rgb))
            tir.append(to_bytes(f.tir[0]))
            boxes.append(_q4(f.gt.box))
            vis.append(f.gt.visible)
        return cls(name, np.stack(rgb), np.stack(tir), np.array(boxes), np.array(vis),
                   np.arange(spec.length))

    @classmethod
    def load(cls, directory) -> "SequenceData":
        d = Path(directory)
        gt_path = d / "gt.csv"
        if not gt_path.exists():
            raise DataError(f"{d}: missing gt.csv")
        ids, boxes, vis = [], [], []
        with open(gt_path, newline="") as fh:
            for row in csv.DictReader(fh):
                try:
                    ids.append(int(row["frame_idx"]))
                    boxes.append([float(row[k]) for k in ("x", "y", "w", "h")])
                    vis.append(bool(int(row["visible"])))
                except (KeyError, ValueError) as exc:
                    raise DataError(f"{gt_path}: malformed row {row}: {exc}") from None
        if not ids:
            raise DataError(f"{gt_path}: no frames")
        rgb, tir = [], []
        for i in ids:
            rp, tp = d / "rgb" / f"{i:06d}.ppm", d / "tir" / f"{i:06d}.pgm"
            if not rp.exists() or not tp.exists():
                raise DataError(f"{d}: missing frame {i}")
            rgb.append(to_bytes(read_pnm(rp)))
            tir.append(to_bytes(read_pnm(tp))[0])
        return cls(d.name, np.stack(rgb), np.stack(tir), np.array(boxes), np.array(vis),
                   np.array(ids), d)


def _q4(box) -> List[float]:
    # gt.csv stores 4 decimals; keep in-memory boxes identical
    return [float(f"{v:.4f}") for v in box]


def load_sequences(paths: Sequence[Path]) -> List[SequenceData]:
    return [SequenceData.load(p) for p in paths]


# --------------------------------------------------------------- sampling
@dataclass
class PairSample:
    seq: int
    t_idx: int
    s_idx: int
    d_idx: Optional[int]
    t_tf: CropTransform
    s_tf: CropTransform
    d_tf: Optional[CropTransform]
    gt: np.ndarray  # normalised (cx, cy, w, h) in the search crop


def _transform(box, factor: float, out: int, shift=(0.0, 0.0), log_scale: float = 0.0) -> CropTransform:
    x, y, w, h = box
    side = float(np.sqrt(w * h)) * factor * float(np.exp(log_scale))
    return CropTransform(x + w / 2 + shift[0] * side, y + h / 2 + shift[1] * side, side, out)


def sample_pairs(seqs: Sequence[SequenceData], n: int, rng: Xoshiro256, tcfg: TrackerConfig,
                 max_gap: int = 40, dyn_prob: float = 0.0, shift: float = 0.2,
                 scale_jitter: float = 0.2) -> List[PairSample]:
    with_dyn = dyn_prob > 0 and rng.random() < dyn_prob
    out = []
    for _ in range(n):
        si = rng.integers(0, len(seqs))
        seq = seqs[si]
        L = len(seq)
        for _attempt in range(20):
            t_idx = rng.integers(0, L)
            s_idx = min(t_idx + rng.integers(0, max_gap + 1), L - 1)
            if seq.visible[t_idx] and seq.visible[s_idx]:
                break
        d_idx = rng.integers(t_idx, s_idx + 1) if with_dyn else None
        t_tf = _transform(seq.boxes[t_idx], 2.0, tcfg.template_size,
                          (rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03)), rng.uniform(-0.05, 0.05))
        s_tf = _transform(seq.boxes[s_idx], 4.0, tcfg.search_size,
                          (rng.uniform(-shift, shift), rng.uniform(-shift, shift)),
                          rng.uniform(-scale_jitter, scale_jitter))
        d_tf = None
        if d_idx is not None:
            d_tf = _transform(seq.boxes[d_idx], 2.0, tcfg.template_size,
                              (rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)), rng.uniform(-0.1, 0.1))
        out.append(PairSample(si, t_idx, s_idx, d_idx, t_tf, s_tf, d_tf, s_tf.to_crop(seq.boxes[s_idx])))
    return out


def _train_pairs(cfg: ExperimentConfig, seqs, n: int, rng: Xoshiro256, dyn_prob: float = 0.0):
    t = cfg.train
    return sample_pairs(seqs, n, rng, cfg.tracker, t.max_gap, dyn_prob, t.jitter_shift, t.jitter_scale)


def _crop(img: np.ndarray, tf: CropTransform) -> np.ndarray:
    return crop_region(img, tf.cx, tf.cy, tf.side, tf.out)[0]


ImageFn = Callable[[SequenceData, int], Tuple[np.ndarray, np.ndarray]]


def _raw(seq: SequenceData, i: int):
    return seq.rgb(i), seq.tir(i)


def crop_batch(seqs, samples: Sequence[PairSample], role: str, image_fn: ImageFn = _raw):
    """Stack the ``role`` crops ('search' | 'template' | 'dyn') of both modalities."""
    rgb, tir = [], []
    for s in samples:
        idx, tf = {"search": (s.s_idx, s.s_tf), "template": (s.t_idx, s.t_tf),
                   "dyn": (s.d_idx, s.d_tf)}[role]
        a, b = image_fn(seqs[s.seq], idx)
        rgb.append(_crop(a, tf))
        tir.append(_crop(b, tf))
    return np.stack(rgb), np.stack(tir)


def expert_crops(seqs, samples, role: str, experts) -> List[np.ndarray]:
    """Crops of each expert's full-frame fused output, (N, 3, S, S) per expert."""
    out = []
    for ex in experts:
        imgs = []
        for s in samples:
            idx, tf = {"search": (s.s_idx, s.s_tf), "template": (s.t_idx, s.t_tf)}[role]
            seq = seqs[s.seq]
            fused = ex.fuse(seq.rgb(idx), seq.tir(idx), int(seq.frame_ids[idx]), seq.name).data
            imgs.append(_crop(fused, tf))
        out.append(np.stack(imgs))
    return out


def make_experts(cfg: ExperimentConfig):
    if cfg.external_experts:
        return [ExternalExpert(eid, d) for eid, d in cfg.external_experts]
    return builtin_experts()


# ----------------------------------------------------------------- models
class AuxEncoder(Module):
    """Modality branch encoder: same layout as the tracker trunk, own weights."""

    def __init__(self, cfg: TrackerConfig, rng):
        self.embed = PatchEmbed(cfg.embed, rng)
        self.encoder = Encoder(cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio, rng)
        self.n_search = cfg.grid ** 2

    def forward(self, search, template) -> Tensor:
        toks = self.encoder(self.embed(search, [template]).tokens)
        return toks[:, :self.n_search]


class AuxBranches(Module):
    def __init__(self, cfg: TrackerConfig, rng):
        self.enc_rgb = AuxEncoder(cfg, rng)
        self.enc_tir = AuxEncoder(cfg, rng)
        self.dec_rgb = ModalityDecoder(cfg.dim, cfg.patch, cfg.grid, rng)
        self.dec_tir = ModalityDecoder(cfg.dim, cfg.patch, cfg.grid, rng)


class TpfModel(Module):
    """Inference model: fusion front end (PFA or pixel average) + tracker."""

    def __init__(self, cfg: ExperimentConfig, fusion: str, rng):
        self.fusion = fusion
        self.pfa = PFA(cfg.pfa, rng) if fusion == "pfa" else None
        self.tracker = Tracker(cfg.tracker, rng)

    def fuse(self, rgb, tir) -> Tensor:
        if self.pfa is None:
            return ops.scale(ops.add(Tensor(np.asarray(rgb)), Tensor(np.asarray(tir))), 0.5)
        return self.pfa(rgb, tir)


def _load_subset(module: Module, state: Dict[str, np.ndarray], prefixes: Sequence[str]) -> None:
    own = dict(module.named_parameters())
    for name, p in own.items():
        if name.startswith(tuple(prefixes)):
            if name not in state:
                raise ConfigError(f"checkpoint lacks parameter {name}")
            if state[name].shape != p.shape:
                raise ConfigError(f"{name}: checkpoint shape {state[name].shape} != config shape {p.shape}")
            p.data = state[name].copy()


def _config_section(cfg: ExperimentConfig, fusion: str) -> Dict[str, np.ndarray]:
    t, p = cfg.tracker, cfg.pfa
    vals = {"tracker.patch": t.patch, "tracker.dim": t.dim, "tracker.depth": t.depth,
            "tracker.heads": t.heads, "tracker.mlp_ratio": t.mlp_ratio,
            "tracker.search_size": t.search_size, "tracker.template_size": t.template_size,
            "pfa.d_state": p.d_state, "pfa.expand": p.expand, "pfa.d_conv": p.d_conv,
            "pfa.extract_kernel": p.extract_kernel, "pfa.extract_stride": p.extract_stride,
            "pfa.decode_kernel": p.decode_kernel, "fusion.pfa": 1.0 if fusion == "pfa" else 0.0}
    return {k: np.array(float(v)) for k, v in vals.items()}


def _check_config_section(cfg: ExperimentConfig, sec: Dict[str, np.ndarray], path) -> str:
    fusion = "pfa" if float(sec.get("fusion.pfa", np.array(1.0))) == 1.0 else "additive"
    want = _config_section(cfg, fusion)
    for k, v in want.items():
        if k.startswith("pfa.") and fusion != "pfa":
            continue
        if k in sec and float(sec[k]) != float(v):
            raise ConfigError(f"{path}: checkpoint {k}={float(sec[k]):g} but config has {float(v):g}")
    return fusion


def tracker_sections(tracker: Tracker) -> Dict[str, Dict[str, np.ndarray]]:
    """Trunk and heads as separate checkpoint sections."""
    st = tracker.state_dict()
    heads = {k: v for k, v in st.items() if k.startswith(("head.", "iou_head."))}
    return {"tracker": {k: v for k, v in st.items() if k not in heads}, "heads": heads}


def tracker_state(ck: Dict[str, Dict[str, np.ndarray]], path) -> Dict[str, np.ndarray]:
    if "tracker" not in ck or "heads" not in ck:
        raise ConfigError(f"{path}: checkpoint lacks tracker/heads sections")
    return {**ck["tracker"], **ck["heads"]}


def read_checkpoint(path) -> Dict[str, Dict[str, np.ndarray]]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    try:
        return load_checkpoint(p)
    except (ValueError, EOFError) as exc:
        raise DataError(f"unreadable checkpoint {p}: {exc}") from None


def load_model(cfg: ExperimentConfig, path) -> TpfModel:
    ck = read_checkpoint(path)
    fusion = _check_config_section(cfg, ck.get("config", {}), path)
    model = TpfModel(cfg, fusion, np.random.default_rng(0))
    try:
        model.tracker.load_state_dict(tracker_state(ck, path))
        if fusion == "pfa":
            model.pfa.load_state_dict(ck["pfa"])
    except KeyError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return model


def save_model(path, cfg: ExperimentConfig, model: TpfModel, extra: Optional[Dict[str, Module]] = None) -> None:
    sections = {"config": _config_section(cfg, model.fusion), **tracker_sections(model.tracker)}
    if model.pfa is not None:
        sections["pfa"] = model.pfa.state_dict()
    for tag, mod in (extra or {}).items():
        sections[tag] = mod.state_dict()
    save_checkpoint(path, sections)


# -------------------------------------------------------------- utilities
def _step(opt: AdamW, loss: Tensor, clip: float = 5.0) -> None:
    opt.zero_grad()
    loss.backward()
    clip_grad_norm(opt.params(), clip)
    opt.step()


def _templates(t_pair, d_pair, fuse) -> list:
    out = [fuse(*t_pair)]
    if d_pair is not None:
        out.append(fuse(*d_pair))
    return out


def _log(verbose: bool, msg: str) -> None:
    if verbose:
        print(msg, flush=True)


# ------------------------------------------------------------ pretraining
def _pretrain_views(seqs, samples, role, experts, rng: Xoshiro256, choices):
    """Per-sample input view: one of the experts' fused images or a raw modality."""
    rgb, tir = crop_batch(seqs, samples, role)
    out = np.empty_like(rgb)
    for i, s in enumerate(samples):
        c = choices[i]
        if c < len(experts):
            seq = seqs[s.seq]
            idx, tf = {"search": (s.s_idx, s.s_tf), "template": (s.t_idx, s.t_tf),
                       "dyn": (s.d_idx, s.d_tf)}[role]
            out[i] = _crop(experts[c].fuse(seq.rgb(idx), seq.tir(idx), int(seq.frame_ids[idx])).data, tf)
        else:
            out[i] = rgb[i] if c == len(experts) else tir[i]
    return out


def pretrain_tracker(cfg: ExperimentConfig, seqs, steps: Optional[int] = None, log_path=None,
                     verbose: bool = False) -> Tracker:
    """Single-stream tracker trained on expert-fused and raw images.

    Stands in for a pretrained backbone: it initialises every fine-tuned
    tracker and supplies the IoU predictor that weights the experts.
    """
    steps = cfg.train.pretrain_steps if steps is None else steps
    tracker = Tracker(cfg.tracker, np.random.default_rng(cfg.seed + 1))
    experts = builtin_experts()
    opt = AdamW(tracker.parameters(), lr=cfg.train.lr_pretrain)
    log = LossLog(log_path) if log_path else None
    for step in range(steps):
        rng = Xoshiro256.derive(cfg.seed, _PRETRAIN, step)
        samples = _train_pairs(cfg, seqs, cfg.train.batch * 2, rng, cfg.train.dyn_prob)
        choices = [rng.integers(0, len(experts) + 2) for _ in samples]
        s = _pretrain_views(seqs, samples, "search", experts, rng, choices)
        t = _pretrain_views(seqs, samples, "template", experts, rng, choices)
        tpls = [t]
        if samples[0].d_idx is not None:
            tpls.append(_pretrain_views(seqs, samples, "dyn", experts, rng, choices))
        head, _ = tracker(s, tpls)
        loss, parts = task_loss(head, np.stack([p.gt for p in samples]), cfg=cfg.task)
        _step(opt, loss)
        if log:
            log.write(step, LossBreakdown(l_task=loss.item(), l_drf=loss.item()))
        if verbose and step % 50 == 0:
            _log(verbose, f"pretrain {step}: {loss.item():.4f} {parts}")
    if log:
        log.close()
    return tracker


# ------------------------------------------------------------ distillation
def expert_weights(cfg: ExperimentConfig, aux: Tracker, samples, seqs, experts,
                   s_exp: List[np.ndarray]) -> np.ndarray:
    """(N, 3) weights per sample from the auxiliary tracker's IoU predictor."""
    n = len(samples)
    mode = cfg.train.weight_mode
    if mode == "single":
        return np.tile(one_hot_weights(cfg.train.single_expert).as_tuple(), (n, 1))
    t_exp = expert_crops(seqs, samples, "template", experts)
    gt = np.stack([p.gt for p in samples])
    scores = np.zeros((n, 3))
    with no_grad():
        for k in range(3):
            head, _ = aux(s_exp[k], [t_exp[k]])
            if mode == "oracle":
                boxes, _ = decode_boxes(head)
                scores[:, k] = realized_iou(boxes, gt)
            else:
                scores[:, k] = head.iou.data
    return np.array([adaptive_weights(*np.clip(row, 0.0, None)).as_tuple() for row in scores])


def _distill_eval_batch(cfg, seqs, experts):
    rng = Xoshiro256.derive(cfg.seed, _DISTILL, 10 ** 6)
    samples = sample_pairs(seqs, 8, rng, cfg.tracker, cfg.train.max_gap)
    rgb, tir = crop_batch(seqs, samples, "search")
    return samples, rgb, tir, expert_crops(seqs, samples, "search", experts)


def distill_pfa(cfg: ExperimentConfig, seqs, aux: Tracker, log_path=None, verbose: bool = False):
    """Train a fresh PFA against the three experts; returns (pfa, summary)."""
    pfa = PFA(cfg.pfa, np.random.default_rng(cfg.seed + 2))
    experts = make_experts(cfg)
    opt = AdamW(pfa.parameters(), lr=cfg.train.lr_distill)
    ev_samples, ev_rgb, ev_tir, ev_exp = _distill_eval_batch(cfg, seqs, experts)
    ev_w = expert_weights(cfg, aux, ev_samples, seqs, experts, ev_exp)

    def eval_loss() -> float:
        with no_grad():
            return distillation_loss(pfa(ev_rgb, ev_tir), ev_exp, ev_w).item()

    initial = eval_loss()
    log = LossLog(log_path) if log_path else None
    for step in range(cfg.train.distill_steps):
        rng = Xoshiro256.derive(cfg.seed, _DISTILL, step)
        samples = _train_pairs(cfg, seqs, cfg.train.batch, rng)
        rgb, tir = crop_batch(seqs, samples, "search")
        s_exp = expert_crops(seqs, samples, "search", experts)
        w = expert_weights(cfg, aux, samples, seqs, experts, s_exp)
        loss = distillation_loss(pfa(rgb, tir), s_exp, w)
        _step(opt, loss)
        if log:
            log.write(step, LossBreakdown(l_dist=loss.item()), AdaptiveWeights(*w.mean(axis=0)))
        if verbose and step % 50 == 0:
            _log(verbose, f"distill {step}: {loss.item():.5f} w={w.mean(axis=0).round(3)}")
    if log:
        log.close()
    final = eval_loss()
    return pfa, {"initial_eval_loss": initial, "final_eval_loss": final,
                 "ratio": final / initial if initial > 0 else 0.0, "steps": cfg.train.distill_steps}


# ------------------------------------------------------------ fine-tuning
def _finetune_groups(cfg: ExperimentConfig, model: TpfModel, aux: Optional[AuxBranches]):
    tr = model.tracker
    groups = [{"params": tr.embed.parameters() + tr.encoder.parameters(), "lr": cfg.train.lr_backbone},
              {"params": tr.head.parameters() + tr.iou_head.parameters(), "lr": cfg.train.lr_head}]
    if model.pfa is not None:
        groups.append({"params": model.pfa.parameters(), "lr": cfg.train.lr_pfa})
    if aux is not None:
        groups.append({"params": aux.parameters(), "lr": cfg.train.lr_aux})
    return groups


def build_finetune_model(cfg: ExperimentConfig, tracker_state: Dict[str, np.ndarray],
                         pfa_state: Optional[Dict[str, np.ndarray]] = None):
    fusion = cfg.train.fusion
    model = TpfModel(cfg, fusion, np.random.default_rng(cfg.seed + 3))
    _load_subset(model.tracker, tracker_state, ("",))
    if fusion == "pfa" and pfa_state is not None:
        _load_subset(model.pfa, pfa_state, ("",))
    aux = None
    if cfg.drf.lam > 0:
        aux = AuxBranches(cfg.tracker, np.random.default_rng(cfg.seed + 4))
        for enc in (aux.enc_rgb, aux.enc_tir):
            _load_subset(enc, tracker_state, ("embed.", "encoder."))
    return model, aux


def finetune_step(cfg: ExperimentConfig, model: TpfModel, aux: Optional[AuxBranches], seqs, step: int,
                  stream: int = None):
    """Loss of one fine-tuning batch: returns (differentiable total, breakdown)."""
    rng = Xoshiro256.derive(cfg.seed, _FINETUNE if stream is None else stream, step)
    samples = _train_pairs(cfg, seqs, cfg.train.batch, rng, cfg.train.dyn_prob)
    s_rgb, s_tir = crop_batch(seqs, samples, "search")
    t_pair = crop_batch(seqs, samples, "template")
    d_pair = crop_batch(seqs, samples, "dyn") if samples[0].d_idx is not None else None
    fused_s = model.fuse(s_rgb, s_tir)
    head, seq = model.tracker(fused_s, _templates(t_pair, d_pair, model.fuse))
    gt = np.stack([p.gt for p in samples])
    l_task, _ = task_loss(head, gt, cfg=cfg.task)
    if aux is None:
        total, bd = drf_total(l_task, 0.0, 0.0, cfg.drf)
        return total, bd
    f_f = seq.part("search")
    feats = BranchFeatures(aux.enc_rgb(s_rgb, t_pair[0]), aux.enc_tir(s_tir, t_pair[1]), f_f)
    l_rep = repulsion_loss(feats, cfg.drf)
    l_rec = reconstruction_loss(feats, (aux.dec_rgb, aux.dec_tir), (s_rgb, s_tir))
    return drf_total(l_task, l_rep, l_rec, cfg.drf)


def finetune(cfg: ExperimentConfig, seqs, tracker_state, pfa_state=None, log_path=None,
             verbose: bool = False):
    model, aux = build_finetune_model(cfg, tracker_state, pfa_state)
    if aux is not None and cfg.train.aux_warmup > 0:
        # fresh decoders first fit the frozen trunk, so their early error does not steer it
        warm = AdamW([{"params": aux.parameters(), "lr": cfg.train.lr_aux}])
        for step in range(cfg.train.aux_warmup):
            total, bd = finetune_step(cfg, model, aux, seqs, step, _AUX_WARMUP)
            _step(warm, total)
            if verbose and step % 50 == 0:
                _log(verbose, f"aux warm-up {step}: rep={bd.l_rep:.4f} rec={bd.l_rec:.4f}")
    opt = AdamW(_finetune_groups(cfg, model, aux))
    log = LossLog(log_path) if log_path else None
    for step in range(cfg.train.finetune_steps):
        total, bd = finetune_step(cfg, model, aux, seqs, step)
        _step(opt, total)
        if log:
            log.write(step, bd)
        if verbose and step % 50 == 0:
            _log(verbose, f"finetune {step}: {bd}")
    if log:
        log.close()
    return model, aux


# --------------------------------------------------------------- tracking
@dataclass
class TrackResult:
    boxes: np.ndarray    # (L, 4) x, y, w, h
    scores: np.ndarray   # (L,)
    metrics: EvalResult
    dyn_sources: List[Optional[int]]


def track_sequence(cfg: ExperimentConfig, model: TpfModel, seq: SequenceData,
                   use_ndtu: Optional[bool] = None) -> TrackResult:
    """One-pass evaluation initialised from the first ground-truth box."""
    use_ndtu = cfg.ndtu.enabled if use_ndtu is None else use_ndtu
    tc = cfg.tracker
    H, W = seq.canvas
    box = np.array(seq.boxes[0], dtype=np.float64)
    boxes, scores, dyn_src = [box.copy()], [1.0], [None]

    def fused_crop(i, tf):
        with no_grad():
            out = model.fuse(_crop(seq.rgb(i), tf)[None], _crop(seq.tir(i), tf)[None])
        return out.data

    init_tpl = fused_crop(0, _transform(box, 2.0, tc.template_size))
    state = NdtuState(p=cfg.ndtu.p, n=cfg.ndtu.n, schedule=cfg.ndtu.schedule)
    for i in range(1, len(seq)):
        tf = _transform(box, 4.0, tc.search_size)
        search = fused_crop(i, tf)
        tpls = current_templates(state, init_tpl) if use_ndtu else [init_tpl]
        with no_grad():
            head, _ = model.tracker(search, tpls)
        nbox, score = decode_boxes(head)
        pred = tf.to_image(nbox[0])
        lr = cfg.track.size_lr
        w = float(np.clip(box[2] + lr * (pred[2] - box[2]), 4.0, W))
        h = float(np.clip(box[3] + lr * (pred[3] - box[3]), 4.0, H))
        cx = float(np.clip(pred[0] + pred[2] / 2, 0.0, W))
        cy = float(np.clip(pred[1] + pred[3] / 2, 0.0, H))
        box = np.array([cx - w / 2, cy - h / 2, w, h])
        s = float(score[0])
        if use_ndtu:
            crop = fused_crop(i, _transform(box, 2.0, tc.template_size)) if s > state.p else None
            state = observe(state, i, s, crop)
        boxes.append(box)
        scores.append(s)
        dyn_src.append(state.active_idx if use_ndtu else None)
    boxes = np.array(boxes)
    metrics = compute_metrics(boxes, seq.boxes)
    return TrackResult(boxes, np.array(scores), metrics, dyn_src)


def write_boxes(path, seq: SequenceData, res: TrackResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_idx", "x", "y", "w", "h", "score"])
        for fid, b, s in zip(seq.frame_ids, res.boxes, res.scores):
            w.writerow([int(fid), *(f"{v:.6f}" for v in b), f"{s:.6f}"])


# -------------------------------------------------------------------- gap
def train_gap_model(cfg: ExperimentConfig, seqs, location: int, verbose: bool = False) -> FusionLocationTracker:
    model = FusionLocationTracker(cfg.tracker, location, np.random.default_rng(cfg.seed + 5))
    opt = AdamW(model.parameters(), lr=cfg.gap.lr)
    for step in range(cfg.gap.steps):
        rng = Xoshiro256.derive(cfg.seed, _GAP, step)
        samples = _train_pairs(cfg, seqs, cfg.gap.batch, rng)
        s_rgb, s_tir = crop_batch(seqs, samples, "search")
        t_rgb, t_tir = crop_batch(seqs, samples, "template")
        head = model(s_rgb, s_tir, t_rgb, t_tir)
        loss, _ = task_loss(head, np.stack([p.gt for p in samples]), cfg=cfg.task)
        _step(opt, loss)
        if verbose and step % 100 == 0:
            _log(verbose, f"gap k={location} step {step}: {loss.item():.4f}")
    return model


def gap_batches(cfg: ExperimentConfig, seq: SequenceData, batch: int = 16):
    """Ground-truth centred crops of the first ``frames`` frames, template from frame 0."""
    tc = cfg.tracker
    n = min(cfg.gap.frames, len(seq))
    t_tf = _transform(seq.boxes[0], 2.0, tc.template_size)
    t_rgb, t_tir = _crop(seq.rgb(0), t_tf), _crop(seq.tir(0), t_tf)
    for start in range(0, n, batch):
        idx = range(start, min(start + batch, n))
        tfs = [_transform(seq.boxes[i], 4.0, tc.search_size) for i in idx]
        s_rgb = np.stack([_crop(seq.rgb(i), tf) for i, tf in zip(idx, tfs)])
        s_tir = np.stack([_crop(seq.tir(i), tf) for i, tf in zip(idx, tfs)])
        k = len(tfs)
        yield s_rgb, s_tir, np.repeat(t_rgb[None], k, 0), np.repeat(t_tir[None], k, 0)


def gap_model_config_section(cfg: ExperimentConfig, location: int) -> Dict[str, np.ndarray]:
    sec = _config_section(cfg, "additive")
    sec["gap.location"] = np.array(float(location))
    return sec


def load_gap_model(cfg: ExperimentConfig, path, location: int) -> FusionLocationTracker:
    ck = read_checkpoint(path)
    sec = ck.get("config", {})
    if "gap.location" in sec and int(sec["gap.location"]) != location:
        raise ConfigError(f"{path}: checkpoint fused at layer {int(sec['gap.location'])}, expected {location}")
    _check_config_section(cfg, {k: v for k, v in sec.items() if k.startswith("tracker.")}, path)
    model = FusionLocationTracker(cfg.tracker, location, np.random.default_rng(0))
    try:
        model.load_state_dict(ck["model"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return model


def write_gap_outputs(out: Path, reports: Sequence[MmdReport]) -> Tuple[Path, Path]:
    """Per-location layer CSVs, a summary CSV (layer, mmd2) of final gaps and an SVG."""
    out.mkdir(parents=True, exist_ok=True)
    for r in reports:
        r.to_csv(out / f"gap_k{r.fusion_layer}.csv")
    summary = out / "gap.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "mmd2"])
        for r in reports:
            w.writerow([r.fusion_layer, repr(float(r.final_mmd2))])
    series = {"final-layer gap": ([r.fusion_layer for r in reports], [r.final_mmd2 for r in reports])}
    for r in reports:
        if r.fusion_layer > 0:
            series[f"fused at {r.fusion_layer}: per-layer"] = (list(range(1, len(r.layer_mmd2) + 1)),
                                                               list(r.layer_mmd2))
    svg = write_svg(out / "gap.svg", line_plot_svg(series, "RGB/TIR feature gap (MMD^2)",
                                                   "fusion layer", "MMD^2"))
    return summary, svg
