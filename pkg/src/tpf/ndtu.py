"""Nearest-neighbour dynamic template updating.

Only the newest reliable crop is retained.  A frame is reliable when its
classification score strictly exceeds ``p``.  At refresh points (every ``n``
frames) the retained crop becomes the active dynamic template, which is then
used for subsequent frames.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple


@dataclass(frozen=True)
class NdtuState:
    p: float = 0.65
    n: int = 50
    schedule: str = "modulo"  # or "sliding"
    s_new: Any = None
    s_new_idx: Optional[int] = None
    active_dyn: Any = None
    active_idx: Optional[int] = None
    frame_idx: Optional[int] = None
    last_refresh: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"update interval must be >= 1, got {self.n}")
        if self.schedule not in ("modulo", "sliding"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def is_refresh_point(state: NdtuState, frame_idx: int) -> bool:
    if state.schedule == "modulo":
        return frame_idx % state.n == 0
    return frame_idx - state.last_refresh >= state.n


def observe(state: NdtuState, frame_idx: int, score_p: float, crop: Any) -> NdtuState:
    if state.frame_idx is not None and frame_idx <= state.frame_idx:
        raise ValueError(f"frame indices must increase: got {frame_idx} after {state.frame_idx}")
    changes = {"frame_idx": frame_idx}
    s_new, s_idx = state.s_new, state.s_new_idx
    if score_p > state.p:
        s_new, s_idx = crop, frame_idx
        changes.update(s_new=crop, s_new_idx=frame_idx)
    if is_refresh_point(state, frame_idx) and s_idx is not None:
        changes.update(active_dyn=s_new, active_idx=s_idx, last_refresh=frame_idx)
    return replace(state, **changes)


def current_templates(state: NdtuState, initial_template: Any) -> List[Any]:
    if state.active_idx is None:
        return [initial_template]
    return [initial_template, state.active_dyn]


def replay(scores: Sequence[float], p: float = 0.65, n: int = 50, start: int = 0,
           schedule: str = "modulo") -> List[Optional[int]]:
    """Active dynamic-template source index after each frame of a score trace."""
    state = NdtuState(p=p, n=n, schedule=schedule, last_refresh=start)
    out = []
    for i, s in enumerate(scores):
        state = observe(state, start + i, s, start + i)
        out.append(state.active_idx)
    return out


def read_trace(path) -> List[Tuple[int, float, str]]:
    """Trace CSV with columns frame_idx, score_p, crop_path."""
    rows = []
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["frame_idx"]), float(row["score_p"]), row["crop_path"]))
    return rows


def write_trace(path, rows: Sequence[Tuple[int, float, str]]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_idx", "score_p", "crop_path"])
        for idx, score, crop in rows:
            w.writerow([idx, repr(float(score)), crop])
