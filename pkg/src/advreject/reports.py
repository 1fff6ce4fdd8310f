"""CSV tables and minimal self-rendered SVG line charts."""

from __future__ import annotations

import csv
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#17becf", "#8c564b", "#e377c2"]


def write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def line_chart(series, title="", xlabel="", ylabel="", width=480, height=320, ylim=(0.0, 1.0)):
    """SVG document for ``series = {name: (xs, ys)}`` on x in [0, 1]."""
    left, right, top, bottom = 56, 130, 30, 46
    pw, ph = width - left - right, height - top - bottom
    y0, y1 = ylim

    def sx(x):
        return left + pw * x

    def sy(y):
        return top + ph * (1 - (y - y0) / (y1 - y0))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        f'<text x="{left + pw / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{top + ph / 2}" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2})">{escape(ylabel)}</text>',
    ]
    for i in range(6):
        t = i / 5
        parts.append(f'<text x="{sx(t):.1f}" y="{top + ph + 14}" text-anchor="middle">{t:.1f}</text>')
        v = y0 + t * (y1 - y0)
        parts.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.2g}</text>')
        parts.append(f'<line x1="{left}" x2="{left + pw}" y1="{sy(v):.1f}" y2="{sy(v):.1f}" stroke="#ddd"/>')
    for j, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[j % len(PALETTE)]
        pts = " ".join(f"{sx(x):.1f},{sy(min(max(y, y0), y1)):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{pts}"/>')
        ly = top + 12 + 16 * j
        parts.append(f'<line x1="{left + pw + 10}" x2="{left + pw + 28}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 32}" y="{ly + 4}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_line_chart(path, series, **kwargs):
    with open(path, "w") as f:
        f.write(line_chart(series, **kwargs))
