"""Minimal standalone SVG line charts.

Plots are written as text (polylines, tick labels, legend) with no plotting
dependency. The canvas is a fixed 960x540 viewBox; panels stack vertically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 960, 540
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 80, 30, 40, 45
PANEL_GAP = 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str = ""
    color: str | None = None
    dash: str | None = None


@dataclass
class Panel:
    series: list[Series] = field(default_factory=list)
    xlabel: str = ""
    ylabel: str = ""
    xlog: bool = False
    ylog: bool = False
    hlines: list[tuple[float, str]] = field(default_factory=list)
    vlines: list[tuple[float, str]] = field(default_factory=list)


def _nice_step(span: float, n: int = 6) -> float:
    raw = span / max(n, 1)
    mag = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 2.5, 5, 10):
        if raw <= m * mag:
            return m * mag
    return 10 * mag


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        a, b = math.floor(math.log10(lo)), math.ceil(math.log10(hi))
        step = max(1, (b - a) // 8)
        return [10.0**k for k in range(a, b + 1, step) if lo <= 10.0**k <= hi]
    step = _nice_step(hi - lo)
    start = math.ceil(lo / step) * step
    n = int(math.floor((hi - start) / step + 1e-9)) + 1
    return [start + i * step for i in range(n)]


def _fmt_tick(v: float, log: bool) -> str:
    if log:
        return f"1e{int(round(math.log10(v)))}"
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.3g}"
    return f"{v:g}"


def _range(values: list[np.ndarray], log: bool) -> tuple[float, float]:
    v = np.concatenate([np.asarray(a, dtype=float).ravel() for a in values]) if values else np.array([0.0, 1.0])
    v = v[np.isfinite(v)]
    if log:
        v = v[v > 0]
    if v.size == 0:
        return (1.0, 10.0) if log else (0.0, 1.0)
    lo, hi = float(v.min()), float(v.max())
    if log:
        if lo == hi:
            lo, hi = lo / 10, hi * 10
        return lo, hi
    if lo == hi:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Map:
    def __init__(self, lo, hi, p0, p1, log):
        self.log = log
        self.lo, self.hi = (math.log10(lo), math.log10(hi)) if log else (lo, hi)
        self.p0, self.p1 = p0, p1

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if self.log:
            v = np.log10(np.where(v > 0, v, np.nan))
        return self.p0 + (v - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)


def _panel_svg(panel: Panel, top: float, height: float) -> list[str]:
    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    y0, y1 = top + height, top
    xs = [s.x for s in panel.series] + [np.array([v for v, _ in panel.vlines])]
    ys = [s.y for s in panel.series] + [np.array([v for v, _ in panel.hlines])]
    xlo, xhi = _range([a for a in xs if np.size(a)], panel.xlog)
    ylo, yhi = _range([a for a in ys if np.size(a)], panel.ylog)
    mx, my = _Map(xlo, xhi, x0, x1, panel.xlog), _Map(ylo, yhi, y0, y1, panel.ylog)
    out = [f'<rect x="{x0}" y="{y1:.1f}" width="{x1 - x0}" height="{height:.1f}" fill="none" stroke="#333"/>']
    for t in _ticks(xlo, xhi, panel.xlog):
        px = float(mx(t))
        out.append(f'<line x1="{px:.1f}" y1="{y1:.1f}" x2="{px:.1f}" y2="{y0:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{px:.1f}" y="{y0 + 14:.1f}" font-size="10" text-anchor="middle">{_fmt_tick(t, panel.xlog)}</text>')
    for t in _ticks(ylo, yhi, panel.ylog):
        py = float(my(t))
        out.append(f'<line x1="{x0}" y1="{py:.1f}" x2="{x1}" y2="{py:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{x0 - 6}" y="{py + 3:.1f}" font-size="10" text-anchor="end">{_fmt_tick(t, panel.ylog)}</text>')
    for v, label in panel.hlines:
        py = float(my(v))
        out.append(f'<line x1="{x0}" y1="{py:.1f}" x2="{x1}" y2="{py:.1f}" stroke="#888" stroke-dasharray="6,4"/>')
        out.append(f'<text x="{x1 - 4}" y="{py - 4:.1f}" font-size="10" text-anchor="end">{escape(label)}</text>')
    for v, label in panel.vlines:
        px = float(mx(v))
        out.append(f'<line x1="{px:.1f}" y1="{y1:.1f}" x2="{px:.1f}" y2="{y0:.1f}" stroke="#999" stroke-dasharray="2,3"/>')
        out.append(f'<text x="{px + 3:.1f}" y="{y1 + 11:.1f}" font-size="9">{escape(label)}</text>')
    legend_y = y1 + 14
    for i, s in enumerate(panel.series):
        color = s.color or COLORS[i % len(COLORS)]
        px, py = mx(s.x), my(s.y)
        ok = np.isfinite(px) & np.isfinite(py)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px[ok], py[ok]))
        dash = f' stroke-dasharray="{s.dash}"' if s.dash else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
        if s.label:
            out.append(f'<line x1="{x0 + 10}" y1="{legend_y - 4:.1f}" x2="{x0 + 30}" y2="{legend_y - 4:.1f}" stroke="{color}" stroke-width="2"{dash}/>')
            out.append(f'<text x="{x0 + 35}" y="{legend_y:.1f}" font-size="11">{escape(s.label)}</text>')
            legend_y += 14
    out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{y0 + 30:.1f}" font-size="12" text-anchor="middle">{escape(panel.xlabel)}</text>')
    cy = (y0 + y1) / 2
    out.append(f'<text x="18" y="{cy:.1f}" font-size="12" text-anchor="middle" transform="rotate(-90 18 {cy:.1f})">{escape(panel.ylabel)}</text>')
    return out


def render(panels: list[Panel], title: str = "") -> str:
    """Standalone SVG document with ``panels`` stacked top to bottom."""
    n = max(len(panels), 1)
    avail = HEIGHT - MARGIN_T - MARGIN_B - PANEL_GAP * (n - 1)
    h = avail / n
    body = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        body.append(f'<text x="{WIDTH / 2}" y="22" font-size="14" text-anchor="middle">{escape(title)}</text>')
    for i, p in enumerate(panels):
        body += _panel_svg(p, MARGIN_T + i * (h + PANEL_GAP), h)
    body.append("</svg>")
    return "\n".join(body) + "\n"
