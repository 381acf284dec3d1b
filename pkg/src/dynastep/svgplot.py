"""Dependency-free SVG line charts for trajectory telemetry."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["render_line_chart"]

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#17becf")

_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 64, 16, 28, 44


def _nice_ticks(lo, hi, target=6):
    """1-2-5 tick positions covering [lo, hi]."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return [0.0]
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(target, 2)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 0.5 * step:
        ticks.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return ticks


def _fmt(v):
    if v == 0.0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.1e}"
    return f"{v:g}"


def render_line_chart(times, series, path, title="", xlabel="t",
                      ylabel="value", width=860, height=480):
    """Write an SVG chart with one polyline per named series.

    ``series`` maps channel names to arrays of the same length as
    ``times``.  Axes are linear with 1-2-5 ticks and a legend keyed by
    stroke color.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0 or not series:
        raise ValueError("nothing to plot")
    ys = [np.asarray(v, dtype=float) for v in series.values()]
    ylo = min(float(np.min(v)) for v in ys)
    yhi = max(float(np.max(v)) for v in ys)
    if yhi - ylo < 1e-12:
        pad = max(1e-6, abs(yhi)) * 0.5 + 1e-9
        ylo, yhi = ylo - pad, yhi + pad
    else:
        pad = 0.05 * (yhi - ylo)
        ylo, yhi = ylo - pad, yhi + pad
    xlo, xhi = float(times[0]), float(times[-1])
    if xhi - xlo < 1e-12:
        xhi = xlo + 1.0

    plot_w = width - _MARGIN_L - _MARGIN_R
    plot_h = height - _MARGIN_T - _MARGIN_B

    def px(x):
        return _MARGIN_L + (x - xlo) / (xhi - xlo) * plot_w

    def py(y):
        return _MARGIN_T + (yhi - y) / (yhi - ylo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{title}</text>')
    # grid and ticks
    for tv in _nice_ticks(xlo, xhi):
        x = px(tv)
        parts.append(
            f'<line x1="{x:.1f}" y1="{_MARGIN_T}" x2="{x:.1f}" '
            f'y2="{_MARGIN_T + plot_h}" stroke="#dddddd" stroke-width="1"/>')
        parts.append(
            f'<text x="{x:.1f}" y="{_MARGIN_T + plot_h + 16}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="11">'
            f'{_fmt(tv)}</text>')
    for tv in _nice_ticks(ylo, yhi):
        y = py(tv)
        parts.append(
            f'<line x1="{_MARGIN_L}" y1="{y:.1f}" x2="{_MARGIN_L + plot_w}" '
            f'y2="{y:.1f}" stroke="#dddddd" stroke-width="1"/>')
        parts.append(
            f'<text x="{_MARGIN_L - 6}" y="{y + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{_fmt(tv)}</text>')
    # axes
    parts.append(
        f'<rect x="{_MARGIN_L}" y="{_MARGIN_T}" width="{plot_w}" '
        f'height="{plot_h}" fill="none" stroke="#333333" stroke-width="1"/>')
    parts.append(
        f'<text x="{_MARGIN_L + plot_w / 2:.1f}" y="{height - 8}" '
        f'text-anchor="middle" font-family="sans-serif" font-size="12">'
        f'{xlabel}</text>')
    parts.append(
        f'<text x="14" y="{_MARGIN_T + plot_h / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 14 {_MARGIN_T + plot_h / 2:.1f})">'
        f'{ylabel}</text>')
    # polylines (decimate to keep files modest)
    n = times.size
    stride = max(1, n // 4000)
    for idx, (name, vals) in enumerate(series.items()):
        color = _COLORS[idx % len(_COLORS)]
        pts = " ".join(
            f"{px(times[i]):.2f},{py(float(vals[i])):.2f}"
            for i in range(0, n, stride))
        if (n - 1) % stride:
            pts += f" {px(times[-1]):.2f},{py(float(vals[-1])):.2f}"
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{pts}"/>')
        lx = _MARGIN_L + plot_w - 110
        ly = _MARGIN_T + 16 + 16 * idx
        parts.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{lx + 28}" y="{ly}" font-family="sans-serif" '
            f'font-size="12">{name}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
