"""The synthetic RGB-T benchmark used by the acceptance runs and demos.

Training sequences cover each degradation on its own; the test sequence mixes
them and adds appearance-change windows.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict

from .synth import SequenceSpec, write_sequence


def train_specs(length: int = 300) -> Dict[str, SequenceSpec]:
    L = length
    w = lambda a, b: (int(a * L), int(b * L))  # noqa: E731
    return {
        "train_a": SequenceSpec(length=L, seed=101, trajectory="sinusoidal", low_light=[w(0.2, 0.45)],
                                n_tir_distractors=1),
        "train_b": SequenceSpec(length=L, seed=102, trajectory="linear", velocity=(1.1, -0.7),
                                crossover=[w(0.5, 0.75)], n_rgb_distractors=1, target_size=(16.0, 16.0)),
        "train_c": SequenceSpec(length=L, seed=103, trajectory="sinusoidal", amplitude=(40.0, 26.0),
                                period=(110.0, 80.0), appearance=[w(0.3, 0.5)], occlusion=[w(0.8, 0.84)],
                                blur_sigma=0.6, target_shape="rect", alt_shape="ellipse"),
    }


def test_spec(length: int = 300, seed: int = 201) -> SequenceSpec:
    L = length
    w = lambda a, b: (int(a * L), int(b * L))  # noqa: E731
    return SequenceSpec(length=L, seed=seed, trajectory="sinusoidal", amplitude=(38.0, 32.0),
                        period=(100.0, 76.0), low_light=[w(0.1, 0.25)], crossover=[w(0.55, 0.7)],
                        appearance=[w(0.3, 0.45), w(0.75, 0.9)], n_rgb_distractors=1,
                        n_tir_distractors=1)


def write_benchmark(root, length: int = 300) -> Dict[str, Path]:
    root = Path(root)
    out = {}
    for name, spec in {**train_specs(length), "test": test_spec(length)}.items():
        out[name] = write_sequence(spec, root / name)
    return out


def gen_config_text(length: int = 300) -> str:
    """INI ``[gen.*]`` sections reproducing the benchmark via ``tpf gen-data``."""
    lines = []
    for name, spec in {**train_specs(length), "test": test_spec(length)}.items():
        lines.append(f"[gen.{name}]")
        for key, val in vars(spec).items():
            if isinstance(val, list):
                val = ", ".join(f"{a}-{b}" for a, b in val)
            elif isinstance(val, tuple):
                val = ", ".join(repr(v) for v in val)
            elif val is None:
                continue
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)
