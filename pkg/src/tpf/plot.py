"""Minimal SVG line plots (axes, ticks, one polyline per series)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence
from xml.sax.saxutils import escape

import numpy as np

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_plot_svg(series: Dict[str, Sequence[Sequence[float]]], title: str = "",
                  xlabel: str = "", ylabel: str = "", width: int = 480, height: int = 320) -> str:
    """``series`` maps a label to ``(xs, ys)``; points are also emitted as
    ``<circle data-x=.. data-y=..>`` so values can be recovered from the file."""
    ml, mr, mt, mb = 60, 20, 30, 45
    xs_all = np.concatenate([np.asarray(v[0], float) for v in series.values()]) if series else np.zeros(1)
    ys_all = np.concatenate([np.asarray(v[1], float) for v in series.values()]) if series else np.zeros(1)
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = min(0.0, float(ys_all.min())), float(ys_all.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for t in np.linspace(x0, x1, 5):
        out.append(f'<text x="{sx(t):.1f}" y="{mt + ph + 16}" text-anchor="middle" font-size="10">{t:.3g}</text>')
    for t in np.linspace(y0, y1, 5):
        out.append(f'<text x="{ml - 6}" y="{sy(t) + 3:.1f}" text-anchor="end" font-size="10">{t:.3g}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 14 {mt + ph / 2})">{escape(ylabel)}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}" '
                   f'data-label="{escape(label)}"/>')
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}" '
                       f'data-label="{escape(label)}" data-x="{float(x)!r}" data-y="{float(y)!r}"/>')
        out.append(f'<text x="{ml + pw - 4}" y="{mt + 14 + 14 * i}" text-anchor="end" font-size="11" '
                   f'fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, svg: str) -> Path:
    p = Path(path)
    p.write_text(svg)
    return p


def read_svg_points(path) -> Dict[str, list]:
    import re
    pts: Dict[str, list] = {}
    pat = re.compile(r'<circle [^>]*data-label="([^"]*)" data-x="([^"]*)" data-y="([^"]*)"')
    for label, x, y in pat.findall(Path(path).read_text()):
        pts.setdefault(label, []).append((float(x), float(y)))
    return pts
