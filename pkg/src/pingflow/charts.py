"""Dependency-free SVG line charts for daily series."""
from __future__ import annotations

import logging
from html import escape

import numpy as np
import pandas as pd

from .core import day_to_date

logger = logging.getLogger(__name__)

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")
WIDTH, HEIGHT = 720, 360
LEFT, RIGHT, TOP, BOTTOM = 64, 150, 28, 48


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if v == v else "nan"


def emit_chart(table: pd.DataFrame, value: str = "rate", group: str = "group", day: str = "day",
               title: str | None = None) -> str | None:
    """One SVG with a polyline per group: x = local date, y = `value`.

    Returns None (with a warning) for an empty table. Output depends only on
    the table's contents, not its row order.
    """
    data = table[[day, group, value]].dropna(subset=[value])
    if data.empty:
        logger.warning("empty table; chart skipped")
        return None
    data = data.assign(**{group: data[group].astype(str)}).sort_values([group, day], kind="stable")
    days = data[day].to_numpy(dtype=np.int64)
    d0, d1 = int(days.min()), int(days.max())
    vals = data[value].to_numpy(dtype=np.float64)
    y0, y1 = min(0.0, float(vals.min())), max(0.0, float(vals.max()))
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(d):
        return LEFT + (pw / 2 if d1 == d0 else (d - d0) / (d1 - d0) * pw)

    def sy(v):
        return TOP + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{LEFT}" y="18" font-size="13">{escape(title)}</text>')
    out += [
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
        f'<text x="{LEFT}" y="{TOP + ph + 16}">{day_to_date(d0).isoformat()}</text>',
        f'<text x="{LEFT + pw}" y="{TOP + ph + 16}" text-anchor="end">{day_to_date(d1).isoformat()}</text>',
        f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle">date</text>',
        f'<text x="{LEFT - 6}" y="{TOP + ph:.1f}" text-anchor="end">{_fmt(y0)}</text>',
        f'<text x="{LEFT - 6}" y="{TOP + 4}" text-anchor="end">{_fmt(y1)}</text>',
        f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">{escape(value)}</text>',
    ]
    if y0 < 0 < y1:
        out.append(f'<line x1="{LEFT}" y1="{sy(0):.1f}" x2="{LEFT + pw}" y2="{sy(0):.1f}" '
                   f'stroke="#999" stroke-dasharray="3,3"/>')
    for i, (name, g) in enumerate(data.groupby(group, sort=True)):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(d):.1f},{sy(v):.1f}" for d, v in zip(g[day], g[value]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = TOP + 14 * i + 6
        out.append(f'<line x1="{LEFT + pw + 12}" y1="{ly}" x2="{LEFT + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 34}" y="{ly + 4}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
