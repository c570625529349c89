"""INI experiment configuration.

Sections and keys (all optional except ``[experiment] seed``)::

    [experiment]  seed, out
    [data]        train (comma-separated sequence dirs), test
    [tracker]     patch, dim, depth, heads, mlp_ratio, search_size, template_size
    [pfa]         d_state, expand, d_conv, extract_kernel, extract_stride, decode_kernel, swap
    [loss]        lam, alpha, mode, w_focal, w_l1, w_giou, w_iou
    [ndtu]        enabled, p, n, schedule
    [train]       fusion, batch, pretrain_steps, distill_steps, finetune_steps, lr_pretrain,
                  lr_distill, lr_backbone, lr_head, lr_aux, lr_pfa, aux_warmup, weight_mode, single_expert,
                  dyn_prob, max_gap, jitter_shift, jitter_scale, init, aux_tracker
    [track]       model (checkpoint, default <out>/model.ckpt), size_lr
    [experts]     external = id:dir, id:dir (replaces the built-ins, in order)
    [gap]         locations, steps, batch, lr, frames, checkpoints, train_missing
    [gen.NAME]    any SequenceSpec field; one section per generated sequence

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .losses import DrfConfig, TaskLossConfig
from .pfa import PfaConfig
from .synth import SequenceSpec
from .tracker import TrackerConfig


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(RuntimeError):
    """Missing or malformed input data (CLI exit code 3)."""


@dataclass(frozen=True)
class NdtuConfig:
    enabled: bool = True
    p: float = 0.65
    n: int = 50
    schedule: str = "modulo"


@dataclass(frozen=True)
class TrainConfig:
    fusion: str = "pfa"  # pfa | additive
    batch: int = 4
    pretrain_steps: int = 500
    distill_steps: int = 500
    finetune_steps: int = 500
    aux_warmup: int = 100  # aux-branch-only steps before joint fine-tuning
    lr_pretrain: float = 1e-3
    lr_distill: float = 3e-3
    lr_backbone: float = 1e-4
    lr_head: float = 1e-3
    lr_aux: float = 1e-3
    lr_pfa: float = 1e-3
    weight_mode: str = "adaptive"  # adaptive | oracle | single
    single_expert: int = 0
    dyn_prob: float = 0.5
    max_gap: int = 40
    jitter_shift: float = 0.2   # search-centre jitter, fraction of the crop side
    jitter_scale: float = 0.4   # search log-scale jitter
    init: str = ""          # distill checkpoint for finetune
    aux_tracker: str = ""   # pretrained tracker checkpoint (skip pretraining)


@dataclass(frozen=True)
class TrackConfig:
    model: str = ""
    size_lr: float = 0.3  # damped size update: w <- w + size_lr * (w_pred - w)


@dataclass(frozen=True)
class GapConfig:
    locations: Tuple[int, ...] = (0, 2, 4)
    steps: int = 500
    batch: int = 4
    lr: float = 1e-3
    frames: int = 120
    checkpoints: str = ""
    train_missing: bool = True


@dataclass
class ExperimentConfig:
    seed: int
    out: Path
    base_dir: Path
    train_data: List[Path] = field(default_factory=list)
    test_data: Optional[Path] = None
    tracker: TrackerConfig = TrackerConfig()
    pfa: PfaConfig = PfaConfig()
    drf: DrfConfig = DrfConfig()
    task: TaskLossConfig = TaskLossConfig()
    ndtu: NdtuConfig = NdtuConfig()
    train: TrainConfig = TrainConfig()
    track: TrackConfig = TrackConfig()
    gap: GapConfig = GapConfig()
    external_experts: List[Tuple[str, Path]] = field(default_factory=list)
    gen: Dict[str, SequenceSpec] = field(default_factory=dict)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else (self.base_dir / q)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _coerce(cls, section: configparser.SectionProxy, name: str):
    """Build dataclass ``cls`` from a section, converting by field default type."""
    kwargs = {}
    valid = {f.name: f for f in dataclasses.fields(cls)}
    for key, raw in section.items():
        if key not in valid:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        default = valid[key].default
        try:
            kwargs[key] = _convert(raw, default)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key} = {raw!r}: {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def _convert(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.replace(";", ",").split(",") if x.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(x) for x in items)
        if default and isinstance(default[0], float):
            return tuple(float(x) for x in items)
        return tuple(items)
    return raw


def _spec_from_section(section: configparser.SectionProxy, name: str) -> SequenceSpec:
    kwargs = {}
    fields_ = {f.name: f for f in dataclasses.fields(SequenceSpec)}
    for key, raw in section.items():
        if key not in fields_:
            raise ConfigError(f"[{name}] unknown sequence field {key!r}")
        f = fields_[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        try:
            if isinstance(default, list):  # degradation windows: "a-b, c-d"
                wins = []
                for part in raw.split(","):
                    part = part.strip()
                    if part:
                        s, e = part.split("-")
                        wins.append((int(s), int(e)))
                kwargs[key] = wins
            elif default is None:  # optional start point
                kwargs[key] = tuple(float(x) for x in raw.split(","))
            else:
                kwargs[key] = _convert(raw, default)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key} = {raw!r}: {exc}") from None
    try:
        return SequenceSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


_DATA_COMMANDS = {"distill", "finetune", "track", "gap"}


def parse_config(text: str, base_dir: Path = Path("."), command: Optional[str] = None,
                 seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {"experiment", "data", "tracker", "pfa", "loss", "ndtu", "train", "track", "gap", "experts"}
    for sec in cp.sections():
        if sec not in known and not sec.startswith("gen."):
            raise ConfigError(f"unknown section [{sec}]")
    exp = cp["experiment"] if cp.has_section("experiment") else {}
    if seed is None:
        if "seed" not in exp:
            raise ConfigError("[experiment] seed is mandatory")
        try:
            seed = int(exp["seed"])
        except ValueError:
            raise ConfigError(f"[experiment] seed must be an integer, got {exp['seed']!r}") from None
    base_dir = Path(base_dir)
    out_path = Path(out) if out is not None else Path(exp.get("out", "runs/default"))
    if not out_path.is_absolute():
        out_path = (Path.cwd() / out_path) if out is not None else (base_dir / out_path)
    cfg = ExperimentConfig(seed=seed, out=out_path, base_dir=base_dir)

    sect = lambda n: cp[n] if cp.has_section(n) else None  # noqa: E731
    if sect("tracker") is not None:
        cfg.tracker = _coerce(TrackerConfig, cp["tracker"], "tracker")
    if sect("pfa") is not None:
        cfg.pfa = _coerce(PfaConfig, cp["pfa"], "pfa")
    if sect("loss") is not None:
        s = cp["loss"]
        drf_keys = {"lam", "alpha", "mode"}
        drf = {k: v for k, v in s.items() if k in drf_keys}
        task = {k: v for k, v in s.items() if k not in drf_keys}
        cfg.drf = _coerce(DrfConfig, _Section(drf), "loss")
        cfg.task = _coerce(TaskLossConfig, _Section(task), "loss")
    if sect("ndtu") is not None:
        cfg.ndtu = _coerce(NdtuConfig, cp["ndtu"], "ndtu")
        if cfg.ndtu.n < 1 or not 0 <= cfg.ndtu.p <= 1 or cfg.ndtu.schedule not in ("modulo", "sliding"):
            raise ConfigError(f"[ndtu] invalid values: {cfg.ndtu}")
    if sect("train") is not None:
        cfg.train = _coerce(TrainConfig, cp["train"], "train")
        if cfg.train.fusion not in ("pfa", "additive"):
            raise ConfigError(f"[train] fusion must be 'pfa' or 'additive', got {cfg.train.fusion!r}")
        if cfg.train.weight_mode not in ("adaptive", "oracle", "single"):
            raise ConfigError(f"[train] unknown weight_mode {cfg.train.weight_mode!r}")
        if not 0 <= cfg.train.single_expert <= 2:
            raise ConfigError("[train] single_expert must be 0, 1 or 2")
        if cfg.train.batch < 1:
            raise ConfigError("[train] batch must be >= 1")
    if sect("track") is not None:
        cfg.track = _coerce(TrackConfig, cp["track"], "track")
        if not 0 < cfg.track.size_lr <= 1:
            raise ConfigError("[track] size_lr must be in (0, 1]")
    if sect("gap") is not None:
        cfg.gap = _coerce(GapConfig, cp["gap"], "gap")
        for k in cfg.gap.locations:
            if not 0 <= k <= cfg.tracker.depth:
                raise ConfigError(f"[gap] location {k} outside [0, {cfg.tracker.depth}]")
    if sect("experts") is not None and "external" in cp["experts"]:
        for item in cp["experts"]["external"].split(","):
            item = item.strip()
            if not item:
                continue
            if ":" not in item:
                raise ConfigError(f"[experts] entries must be id:dir, got {item!r}")
            eid, d = item.split(":", 1)
            cfg.external_experts.append((eid.strip(), cfg.resolve(d.strip())))
        if len(cfg.external_experts) != 3:
            raise ConfigError("[experts] external needs exactly three id:dir entries")
    for sec in cp.sections():
        if sec.startswith("gen."):
            spec = _spec_from_section(cp[sec], sec)
            cfg.gen[sec[4:]] = spec
    if sect("data") is not None:
        d = cp["data"]
        cfg.train_data = [cfg.resolve(p.strip()) for p in d.get("train", "").split(",") if p.strip()]
        cfg.test_data = cfg.resolve(d["test"].strip()) if d.get("test", "").strip() else None
    if command in _DATA_COMMANDS:
        _check_paths(cfg, command)
    return cfg


class _Section(dict):
    def items(self):  # mimic SectionProxy
        return super().items()


def _check_paths(cfg: ExperimentConfig, command: str) -> None:
    needed: List[Path] = []
    if command in ("distill", "finetune", "gap"):
        if not cfg.train_data:
            raise ConfigError("[data] train must list at least one sequence directory")
        needed += cfg.train_data
    if command == "track":
        if cfg.test_data is None:
            raise ConfigError("[data] test is required for track")
        needed.append(cfg.test_data)
    for key, cmds in (("init", ("finetune",)), ("aux_tracker", ("distill", "finetune"))):
        val = getattr(cfg.train, key)
        if val and command in cmds:
            needed.append(cfg.resolve(val))
    if command == "track" and cfg.track.model:
        needed.append(cfg.resolve(cfg.track.model))
    for _, d in cfg.external_experts:
        needed.append(d)
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise ConfigError(f"referenced paths do not exist: {', '.join(missing)}")


def load_config(path, command: Optional[str] = None, seed: Optional[int] = None,
                out: Optional[str] = None) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), p.parent.resolve(), command, seed, out)
