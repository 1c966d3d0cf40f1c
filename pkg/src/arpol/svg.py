"""Tiny standalone SVG chart writer (line and bar charts, no dependencies).

Plots are conveniences; every number they show also lives in a delimited
report. Output is a pure function of the data, so rerenders are
byte-identical.
"""

from __future__ import annotations

import math

WIDTH, HEIGHT = 640, 400
MARGIN = 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _finite(points):
    return [(x, y) for x, y in points if math.isfinite(x) and math.isfinite(y)]


def _scale(lo, hi):
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def render_line_chart(series: dict, path, title: str = "",
                      x_label: str = "", y_label: str = "") -> None:
    """series maps name -> list of (x, y) points; non-finite points are dropped."""
    cleaned = {name: _finite(pts) for name, pts in series.items()}
    all_pts = [p for pts in cleaned.values() for p in pts]
    if not all_pts:
        all_pts = [(0.0, 0.0), (1.0, 1.0)]
    x_lo, x_hi = _scale(min(p[0] for p in all_pts), max(p[0] for p in all_pts))
    y_lo, y_hi = _scale(min(p[1] for p in all_pts), max(p[1] for p in all_pts))
    inner_w = WIDTH - 2 * MARGIN
    inner_h = HEIGHT - 2 * MARGIN

    def sx(x):
        return MARGIN + (x - x_lo) / (x_hi - x_lo) * inner_w

    def sy(y):
        return HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * inner_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">{x_label}</text>',
        f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {HEIGHT / 2})">{y_label}</text>',
        f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 16}" font-size="10">{_fmt(x_lo)}</text>',
        f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 16}" text-anchor="end" '
        f'font-size="10">{_fmt(x_hi)}</text>',
        f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" text-anchor="end" font-size="10">{_fmt(y_lo)}</text>',
        f'<text x="{MARGIN - 4}" y="{MARGIN + 4}" text-anchor="end" font-size="10">{_fmt(y_hi)}</text>',
    ]
    for i, (name, pts) in enumerate(cleaned.items()):
        if not pts:
            continue
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{WIDTH - MARGIN}" y="{MARGIN + 16 * i}" text-anchor="end" '
                     f'font-size="12" fill="{color}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(parts) + "\n")


def render_bar_chart(labels, values, path, title: str = "", y_label: str = "") -> None:
    vals = [v if math.isfinite(v) else 0.0 for v in values]
    y_lo = min(0.0, min(vals, default=0.0))
    y_lo, y_hi = _scale(y_lo, max(vals, default=1.0))
    inner_w = WIDTH - 2 * MARGIN
    inner_h = HEIGHT - 2 * MARGIN
    n = max(1, len(vals))
    slot = inner_w / n
    bar_w = slot * 0.6

    def sy(y):
        return HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * inner_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<line x1="{MARGIN}" y1="{sy(0.0):.2f}" x2="{WIDTH - MARGIN}" '
        f'y2="{sy(0.0):.2f}" stroke="black"/>',
        f'<text x="16" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {HEIGHT / 2})">{y_label}</text>',
    ]
    for i, (label, v) in enumerate(zip(labels, vals)):
        x0 = MARGIN + i * slot + (slot - bar_w) / 2
        y_top = sy(max(0.0, v))
        h = abs(sy(v) - sy(0.0))
        parts.append(f'<rect x="{x0:.2f}" y="{y_top:.2f}" width="{bar_w:.2f}" '
                     f'height="{h:.2f}" fill="{PALETTE[i % len(PALETTE)]}"/>')
        parts.append(f'<text x="{x0 + bar_w / 2:.2f}" y="{HEIGHT - MARGIN + 16}" '
                     f'text-anchor="middle" font-size="10">{label}</text>')
        parts.append(f'<text x="{x0 + bar_w / 2:.2f}" y="{y_top - 4:.2f}" '
                     f'text-anchor="middle" font-size="10">{_fmt(v)}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(parts) + "\n")
