"""Minimal SVG line and bar charts (axes, ticks, polylines, legend)."""
from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

_W, _H = 640, 400
_LEFT, _RIGHT, _TOP, _BOTTOM = 60, 150, 40, 50


def _fmt(v):
    return f"{v:.2f}".rstrip("0").rstrip(".") if v != int(v) else str(int(v))


def _frame(title, xlabel, ylabel, xlim, ylim, xticks, yticks):
    x0, x1 = xlim
    y0, y1 = ylim
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM

    def sx(x):
        return _LEFT + (x - x0) / ((x1 - x0) or 1) * pw

    def sy(y):
        return _TOP + ph - (y - y0) / ((y1 - y0) or 1) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<line x1="{_LEFT}" y1="{_TOP + ph}" x2="{_LEFT + pw}" y2="{_TOP + ph}" stroke="black"/>',
        f'<line x1="{_LEFT}" y1="{_TOP}" x2="{_LEFT}" y2="{_TOP + ph}" stroke="black"/>',
    ]
    for t in yticks:
        y = sy(t)
        parts.append(f'<line x1="{_LEFT - 4}" y1="{y:.1f}" x2="{_LEFT + pw}" y2="{y:.1f}" stroke="#e0e0e0"/>')
        parts.append(
            f'<text x="{_LEFT - 7}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{_fmt(t)}</text>'
        )
    for t, label in xticks:
        x = sx(t)
        parts.append(f'<line x1="{x:.1f}" y1="{_TOP + ph}" x2="{x:.1f}" y2="{_TOP + ph + 4}" stroke="black"/>')
        parts.append(
            f'<text x="{x:.1f}" y="{_TOP + ph + 17}" text-anchor="middle" font-family="sans-serif" font-size="11">{escape(str(label))}</text>'
        )
    parts.append(
        f'<text x="{_LEFT + pw / 2:.1f}" y="{_H - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xlabel)}</text>'
    )
    parts.append(
        f'<text x="16" y="{_TOP + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {_TOP + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    return parts, sx, sy


def _legend(parts, names):
    x = _W - _RIGHT + 12
    for k, name in enumerate(names):
        y = _TOP + 10 + 18 * k
        color = PALETTE[k % len(PALETTE)]
        parts.append(f'<line x1="{x}" y1="{y}" x2="{x + 18}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{x + 24}" y="{y + 4}" font-family="sans-serif" font-size="11">{escape(name)}</text>')


def _int_ticks(lo, hi, n=6):
    if hi <= lo:
        return [lo]
    step = max(1, round((hi - lo) / (n - 1)))
    ticks = list(range(int(lo), int(hi) + 1, step))
    if ticks[-1] != hi:
        ticks.append(int(hi))
    return ticks


def line_chart(series: dict, *, title: str, xlabel: str = "round", ylabel: str = "accuracy", ylim=(0.0, 1.0)) -> str:
    """``series`` maps a legend name to ``(xs, ys)``."""
    xs_all = [x for xs, _ in series.values() for x in xs] or [0, 1]
    xlim = (min(xs_all), max(xs_all))
    yticks = [ylim[0] + (ylim[1] - ylim[0]) * k / 5 for k in range(6)]
    xticks = [(t, t) for t in _int_ticks(*xlim)]
    parts, sx, sy = _frame(title, xlabel, ylabel, xlim, ylim, xticks, yticks)
    for k, (name, (xs, ys)) in enumerate(series.items()):
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
        color = PALETTE[k % len(PALETTE)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
    _legend(parts, list(series))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart(labels, values, *, title: str, xlabel: str = "client", ylabel: str = "weight", ymax=None) -> str:
    n = len(values)
    top = ymax if ymax is not None else max(max(values, default=0.0) * 1.15, 1e-9)
    yticks = [top * k / 5 for k in range(6)]
    xticks = [(k + 0.5, lab) for k, lab in enumerate(labels)]
    parts, sx, sy = _frame(title, xlabel, ylabel, (0, max(n, 1)), (0, top), xticks, yticks)
    width = (sx(1) - sx(0)) * 0.7
    for k, v in enumerate(values):
        x = sx(k + 0.5) - width / 2
        y = sy(v)
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{width:.1f}" height="{sy(0) - y:.1f}" fill="{PALETTE[0]}"/>'
        )
        parts.append(
            f'<text x="{x + width / 2:.1f}" y="{y - 3:.1f}" text-anchor="middle" font-family="sans-serif" font-size="10">{v:.3f}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
