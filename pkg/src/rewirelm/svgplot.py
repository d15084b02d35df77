"""Dependency-free SVG charts for experiment reports.

Only what the reports need: multi-series line charts (linear or log-10 x),
scatter overlays for event markers, and a labeled bar chart.  Each line
series renders as exactly one <polyline> element, which keeps the output
trivially checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

PALETTE = ["#4878cf", "#d65f5f", "#6acc65", "#b47cc7", "#c4ad66", "#77bedb",
           "#8c8c8c", "#e377c2"]

MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 16, 36, 46


@dataclass
class Series:
    label: str
    xs: list
    ys: list
    mode: str = "line"  # "line" | "points"


def _nice_ticks(lo: float, hi: float, n: int = 5):
    """Round tick positions covering [lo, hi] at a 1/2/5 step."""
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(1, n)
    mag = 10.0 ** math.floor(math.log10(raw))
    for m in (1.0, 2.0, 5.0, 10.0):
        if raw <= m * mag:
            step = m * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < step * 1e-6 else t)
        t += step
    return ticks


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    a = abs(v)
    if a >= 1e6 and a % 1e6 == 0:
        return f"{v / 1e6:g}M"
    if a >= 1e3 and a % 1e3 == 0:
        return f"{v / 1e3:g}K"
    return f"{v:g}"


def _data_bounds(series, log_x):
    xs = [math.log10(x) if log_x else x for s in series for x in s.xs]
    ys = [y for s in series for y in s.ys]
    if not xs:
        raise ValueError("no data to plot")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    return x0, x1, y0 - pad, y1 + pad


def line_chart(series, *, title="", xlabel="", ylabel="", width=680, height=420,
               log_x=False) -> str:
    """Render series to an SVG string; caller writes it to a file."""
    series = [s if isinstance(s, Series) else Series(*s) for s in series]
    x0, x1, y0, y1 = _data_bounds(series, log_x)
    pw = width - MARGIN_L - MARGIN_R
    ph = height - MARGIN_T - MARGIN_B

    def px(x):
        v = math.log10(x) if log_x else x
        return MARGIN_L + pw * (v - x0) / (x1 - x0)

    def py(y):
        return MARGIN_T + ph * (1.0 - (y - y0) / (y1 - y0))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14" '
        f'font-weight="bold">{escape(title)}</text>' if title else "",
    ]

    # gridlines + axis labels
    if log_x:
        lo_d, hi_d = math.floor(x0), math.ceil(x1)
        xticks = [10.0 ** d for d in range(int(lo_d), int(hi_d) + 1)
                  if x0 - 1e-9 <= d <= x1 + 1e-9]
    else:
        xticks = _nice_ticks(x0, x1)
    for t in xticks:
        x = px(t) if log_x else MARGIN_L + pw * (t - x0) / (x1 - x0)
        out.append(f'<line x1="{x:.1f}" y1="{MARGIN_T}" x2="{x:.1f}" '
                   f'y2="{MARGIN_T + ph}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{x:.1f}" y="{MARGIN_T + ph + 16}" '
                   f'text-anchor="middle">{_fmt(t)}</text>')
    for t in _nice_ticks(y0, y1):
        y = py(t)
        out.append(f'<line x1="{MARGIN_L}" y1="{y:.1f}" x2="{MARGIN_L + pw}" '
                   f'y2="{y:.1f}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{MARGIN_L - 6}" y="{y + 4:.1f}" '
                   f'text-anchor="end">{_fmt(round(t, 10))}</text>')
    out.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" '
               f'fill="none" stroke="#333"/>')

    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = [(px(x), py(y)) for x, y in zip(s.xs, s.ys)]
        if s.mode == "points":
            for x, y in pts:
                out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3.5" '
                           f'fill="{color}"/>')
        else:
            coords = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            out.append(f'<polyline points="{coords}" fill="none" '
                       f'stroke="{color}" stroke-width="1.8"/>')
        ly = MARGIN_T + 8 + 16 * i
        lx = MARGIN_L + pw - 150
        swatch = (f'<circle cx="{lx + 9}" cy="{ly - 4}" r="3.5" fill="{color}"/>'
                  if s.mode == "points" else
                  f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
                  f'stroke="{color}" stroke-width="2.5"/>')
        out.append(swatch)
        out.append(f'<text x="{lx + 24}" y="{ly}">{escape(s.label)}</text>')

    if xlabel:
        out.append(f'<text x="{MARGIN_L + pw / 2:.0f}" y="{height - 8}" '
                   f'text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{MARGIN_T + ph / 2:.0f}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {MARGIN_T + ph / 2:.0f})">'
                   f'{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(line for line in out if line)


def bar_chart(labels, values, *, title="", ylabel="", width=520, height=360) -> str:
    """Vertical bars with value labels; bars sharing an axis at zero."""
    if len(labels) != len(values):
        raise ValueError("labels and values must align")
    if not labels:
        raise ValueError("no data to plot")
    y0 = min(0.0, min(values))
    y1 = max(0.0, max(values))
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.12 * (y1 - y0)
    y0, y1 = y0 - (pad if y0 < 0 else 0), y1 + pad
    pw = width - MARGIN_L - MARGIN_R
    ph = height - MARGIN_T - MARGIN_B

    def py(y):
        return MARGIN_T + ph * (1.0 - (y - y0) / (y1 - y0))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14" '
        f'font-weight="bold">{escape(title)}</text>' if title else "",
    ]
    for t in _nice_ticks(y0, y1):
        y = py(t)
        out.append(f'<line x1="{MARGIN_L}" y1="{y:.1f}" x2="{MARGIN_L + pw}" '
                   f'y2="{y:.1f}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{MARGIN_L - 6}" y="{y + 4:.1f}" '
                   f'text-anchor="end">{_fmt(round(t, 10))}</text>')
    slot = pw / len(labels)
    bw = slot * 0.6
    zero = py(0.0)
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = MARGIN_L + slot * i + (slot - bw) / 2
        top, bottom = (py(v), zero) if v >= 0 else (zero, py(v))
        out.append(f'<rect x="{x:.1f}" y="{top:.1f}" width="{bw:.1f}" '
                   f'height="{max(0.5, bottom - top):.1f}" '
                   f'fill="{PALETTE[i % len(PALETTE)]}"/>')
        vy = top - 5 if v >= 0 else bottom + 14
        out.append(f'<text x="{x + bw / 2:.1f}" y="{vy:.1f}" '
                   f'text-anchor="middle">{v:+.1%}</text>')
        out.append(f'<text x="{x + bw / 2:.1f}" y="{MARGIN_T + ph + 16}" '
                   f'text-anchor="middle">{escape(str(lab))}</text>')
    out.append(f'<line x1="{MARGIN_L}" y1="{zero:.1f}" x2="{MARGIN_L + pw}" '
               f'y2="{zero:.1f}" stroke="#333"/>')
    out.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" '
               f'fill="none" stroke="#333"/>')
    if ylabel:
        out.append(f'<text x="14" y="{MARGIN_T + ph / 2:.0f}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {MARGIN_T + ph / 2:.0f})">'
                   f'{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(line for line in out if line)
