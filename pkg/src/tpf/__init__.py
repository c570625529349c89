"""RGB-T tracking with a pixel-level fusion adapter.

Subpackages and modules:

- ``tpf.autograd``: float64 reverse-mode autodiff, layers, AdamW, checkpoints
- ``tpf.ssm``: selective scan and the bidirectional ViM block
- ``tpf.pfa``: the fusion adapter (RGB + TIR -> fused image)
- ``tpf.tracker``: one-stream transformer tracker
- ``tpf.losses``: distillation, repulsion, reconstruction and task losses
- ``tpf.experts``, ``tpf.ndtu``, ``tpf.gap``, ``tpf.metrics``, ``tpf.synth``
- ``tpf.pipeline`` and ``tpf.cli``: training, tracking and analysis runs
"""

__version__ = "0.1.0"
