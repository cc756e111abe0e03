"""Dependency-free SVG line plots."""
from __future__ import annotations

from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 360
MARGIN = 50


def _fmt(v):
    return f"{v:.2f}"


def line_plot(series, title="", xlabel="", ylabel="", markers=None, ylim=None) -> str:
    """``series`` is a list of (label, xs, ys); ``markers`` a list of (x, y) points."""
    xs_all = [x for _, xs, _ in series for x in xs] or [0.0, 1.0]
    ys_all = [y for _, _, ys in series for y in ys if y == y] or [0.0, 1.0]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = ylim if ylim else (min(ys_all), max(ys_all))
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN

    def px(x):
        return MARGIN + (x - x0) / (x1 - x0) * pw

    def py(y):
        return HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{MARGIN / 2}" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
        f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 15}" font-size="10" text-anchor="middle">{x0:.3g}</text>',
        f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 15}" font-size="10" text-anchor="middle">{x1:.3g}</text>',
        f'<text x="{MARGIN - 5}" y="{HEIGHT - MARGIN}" font-size="10" text-anchor="end">{y0:.3g}</text>',
        f'<text x="{MARGIN - 5}" y="{MARGIN + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>',
    ]
    for i, (label, xs, ys) in enumerate(series):
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys) if y == y)
        color = colors[i % len(colors)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{WIDTH - MARGIN - 5}" y="{MARGIN + 15 * (i + 1)}" font-size="11" '
                   f'text-anchor="end" fill="{color}">{escape(label)}</text>')
    for x, y in markers or []:
        out.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3.5" fill="none" stroke="#d62728"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
