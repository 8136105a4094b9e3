"""Minimal SVG line charts with a logarithmic y axis."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def svg_log_chart(series, title="", xlabel="step", ylabel="error", width=640, height=420):
    """Render ``{label: [(x, y), ...]}`` as an SVG string.

    Non-positive or non-finite y values are dropped (they have no place on a
    log axis).
    """
    clean = {}
    for label, pts in series.items():
        keep = [(float(x), float(y)) for x, y in pts if y is not None and math.isfinite(y) and y > 0]
        clean[label] = keep
    xs = [x for pts in clean.values() for x, _ in pts]
    ys = [y for pts in clean.values() for _, y in pts]
    left, right, top, bottom = 70, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    if not xs:
        out.append("</svg>")
        return "\n".join(out) + "\n"
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1.0
    lo, hi = math.floor(math.log10(min(ys))), math.ceil(math.log10(max(ys)))
    if hi == lo:
        hi = lo + 1

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (hi - math.log10(y)) / (hi - lo) * ph

    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for e in range(lo, hi + 1):
        yy = py(10.0 ** e)
        out.append(f'<line x1="{left}" y1="{yy:.2f}" x2="{left + pw}" y2="{yy:.2f}" stroke="#dddddd"/>')
        out.append(f'<text x="{left - 6}" y="{yy + 4:.2f}" text-anchor="end" font-size="11">1e{e}</text>')
    nt = 5
    for i in range(nt + 1):
        xv = x0 + (x1 - x0) * i / nt
        out.append(f'<text x="{px(xv):.2f}" y="{top + ph + 16}" text-anchor="middle" font-size="11">{xv:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (label, pts) in enumerate(clean.items()):
        color = _COLORS[i % len(_COLORS)]
        if pts:
            coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{coords}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}" font-size="11">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, series, **kwargs):
    Path(path).write_text(svg_log_chart(series, **kwargs), encoding="utf-8")
