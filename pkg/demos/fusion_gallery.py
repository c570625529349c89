"""Render one degraded frame and write each expert's fusion next to the raw modalities.

    python3 demos/fusion_gallery.py OUT_DIR
"""

import sys
from pathlib import Path

from tpf.experts import builtin_experts
from tpf.imageio import write_pnm
from tpf.synth import SequenceRenderer, SequenceSpec, target_contrast

out = Path(sys.argv[1] if len(sys.argv) > 1 else "gallery")
out.mkdir(parents=True, exist_ok=True)
spec = SequenceSpec(length=40, seed=7, low_light=[(10, 30)], n_tir_distractors=1)
frame = SequenceRenderer(spec).render(20)

write_pnm(out / "rgb.ppm", frame.rgb)
write_pnm(out / "tir.pgm", frame.tir[:1])
print(f"rgb contrast {target_contrast(frame.rgb, frame.gt.box):.3f}")
print(f"tir contrast {target_contrast(frame.tir, frame.gt.box):.3f}")
for expert in builtin_experts():
    fused = expert.fuse(frame.rgb, frame.tir)
    write_pnm(out / f"{expert.id}.ppm", fused.data)
    print(f"{expert.id:8s} contrast {target_contrast(fused.data, frame.gt.box):.3f}")
