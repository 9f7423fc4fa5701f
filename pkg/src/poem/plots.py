"""Minimal SVG line plots of recorded training curves."""

from __future__ import annotations

from pathlib import Path

import numpy as np

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]


def _smooth(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size <= window:
        return v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def _polyline(ys, x0, y0, w, h, lo, hi, color) -> str:
    if len(ys) < 2:
        return ""
    xs = x0 + w * np.arange(len(ys)) / (len(ys) - 1)
    span = hi - lo if hi > lo else 1.0
    pts = " ".join(f"{x:.1f},{y0 + h - h * (y - lo) / span:.1f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def write_svg(path: str | Path, records: dict) -> Path:
    """Loss curves (left panel) and evaluation accuracy (right panel), one colour per run."""
    w, h, pad = 320, 200, 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * w + 3 * pad}" height="{h + 2 * pad + 20}">',
             f'<text x="{pad}" y="20" font-size="12">loss</text>',
             f'<text x="{2 * pad + w}" y="20" font-size="12">eval accuracy</text>']
    losses = {k: _smooth(r.losses) for k, r in records.items()}
    accs = {k: [e.get("accuracy", e.get("cell_accuracy")) for e in r.evals] for k, r in records.items()}
    all_l = np.concatenate([v for v in losses.values() if len(v)] or [np.zeros(1)])
    for i, (name, ys) in enumerate(losses.items()):
        color = COLORS[i % len(COLORS)]
        parts.append(_polyline(ys, pad, pad, w, h, float(all_l.min()), float(all_l.max()), color))
        parts.append(_polyline(accs[name], 2 * pad + w, pad, w, h, 0.0, 1.0, color))
        parts.append(f'<text x="{pad + 90 * i}" y="{h + 2 * pad + 10}" font-size="11" fill="{color}">{name}</text>')
    for x in (pad, 2 * pad + w):
        parts.append(f'<rect x="{x}" y="{pad}" width="{w}" height="{h}" fill="none" stroke="#888"/>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(p for p in parts if p) + "\n")
    return path
