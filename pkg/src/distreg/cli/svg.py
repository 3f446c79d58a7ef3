"""Minimal self-contained SVG emitters.

No plotting library: every byte is produced here with fixed float formatting,
so identical inputs give identical files, which keeps plots diffable in tests
and reports reproducible.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["line_chart", "scatter_chart", "histogram", "boxplot"]

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 60, 20, 36, 46
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")


def _fmt(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".")


class _Canvas:
    def __init__(self, title: str, xlim, ylim, xlabel: str = "", ylabel: str = ""):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        ]
        x0, x1 = xlim
        y0, y1 = ylim
        if x1 <= x0:
            x1 = x0 + 1.0
        if y1 <= y0:
            y1 = y0 + 1.0
        self.xlim, self.ylim = (x0, x1), (y0, y1)
        self.parts.append(
            f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
            f'height="{_H - _MT - _MB}" fill="none" stroke="#333"/>'
        )
        for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
            xv = x0 + frac * (x1 - x0)
            yv = y0 + frac * (y1 - y0)
            px, py = self.px(xv), self.py(yv)
            self.parts.append(
                f'<text x="{_fmt(px)}" y="{_H - _MB + 16}" text-anchor="middle" '
                f'fill="#333">{_fmt(xv)}</text>'
            )
            self.parts.append(
                f'<text x="{_ML - 6}" y="{_fmt(py + 4)}" text-anchor="end" '
                f'fill="#333">{_fmt(yv)}</text>'
            )
        if xlabel:
            self.parts.append(
                f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle">{xlabel}</text>'
            )
        if ylabel:
            self.parts.append(
                f'<text x="14" y="{_H / 2}" text-anchor="middle" '
                f'transform="rotate(-90 14 {_H / 2})">{ylabel}</text>'
            )

    def px(self, x: float) -> float:
        x0, x1 = self.xlim
        return _ML + (x - x0) / (x1 - x0) * (_W - _ML - _MR)

    def py(self, y: float) -> float:
        y0, y1 = self.ylim
        return _H - _MB - (y - y0) / (y1 - y0) * (_H - _MT - _MB)

    def polyline(self, xs, ys, color: str, width: float = 1.5, dash: str = ""):
        pts = " ".join(f"{_fmt(self.px(x))},{_fmt(self.py(y))}" for x, y in zip(xs, ys))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"{extra}/>'
        )

    def circle(self, x, y, color: str, r: float = 2.0):
        self.parts.append(
            f'<circle cx="{_fmt(self.px(x))}" cy="{_fmt(self.py(y))}" r="{r}" '
            f'fill="{color}"/>'
        )

    def rect(self, x0, y0, x1, y1, color: str, stroke: str = "#333"):
        px0, px1 = self.px(x0), self.px(x1)
        py0, py1 = self.py(y1), self.py(y0)
        self.parts.append(
            f'<rect x="{_fmt(px0)}" y="{_fmt(py0)}" width="{_fmt(px1 - px0)}" '
            f'height="{_fmt(py1 - py0)}" fill="{color}" stroke="{stroke}"/>'
        )

    def legend(self, labels_colors):
        x = _ML + 10
        for i, (label, color) in enumerate(labels_colors):
            y = _MT + 16 + 16 * i
            self.parts.append(
                f'<rect x="{x}" y="{y - 9}" width="10" height="10" fill="{color}"/>'
            )
            self.parts.append(f'<text x="{x + 14}" y="{y}">{label}</text>')

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.parts + ["</svg>"]) + "\n")
        return path


def _limits(arrays):
    lo = min(float(np.min(a)) for a in arrays if len(a))
    hi = max(float(np.max(a)) for a in arrays if len(a))
    if hi <= lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def line_chart(series: dict, path, title: str = "", xlabel: str = "",
               ylabel: str = "") -> Path:
    """Polyline chart; ``series`` maps label -> (x, y) arrays."""
    xs = [np.asarray(x, dtype=float) for x, _ in series.values()]
    ys = [np.asarray(y, dtype=float) for _, y in series.values()]
    canvas = _Canvas(title, _limits(xs), _limits(ys), xlabel, ylabel)
    entries = []
    for i, (label, (x, y)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        canvas.polyline(np.asarray(x, dtype=float), np.asarray(y, dtype=float), color)
        entries.append((label, color))
    if len(entries) > 1:
        canvas.legend(entries)
    return canvas.write(path)


def scatter_chart(x, y, path, title: str = "", xlabel: str = "", ylabel: str = "",
                  identity_line: bool = False) -> Path:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lims = _limits([x, y])
    canvas = _Canvas(title, lims, lims, xlabel, ylabel)
    if identity_line:
        canvas.polyline(np.asarray(lims), np.asarray(lims), "#999", width=1.0, dash="4 3")
    for xi, yi in zip(x, y):
        canvas.circle(xi, yi, _PALETTE[0])
    return canvas.write(path)


def histogram(values, path, bins: int = 30, title: str = "", xlabel: str = "") -> Path:
    values = np.asarray(values, dtype=float)
    counts, edges = np.histogram(values, bins=bins)
    canvas = _Canvas(title, _limits([edges]), (0.0, float(counts.max() or 1)),
                     xlabel, "count")
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        if c:
            canvas.rect(lo, 0.0, hi, float(c), "#9ecae1")
    return canvas.write(path)


def boxplot(stats: dict, values, path, title: str = "") -> Path:
    """Box-and-whiskers from precomputed quartiles/fences plus raw outliers."""
    values = np.asarray(values, dtype=float)
    ylim = _limits([values])
    canvas = _Canvas(title, (0.0, 2.0), ylim, "", "estimate")
    q1, med, q3 = stats["q1"], stats["median"], stats["q3"]
    lo_w = float(values[values >= stats["fence_low"]].min())
    hi_w = float(values[values <= stats["fence_high"]].max())
    canvas.rect(0.7, q1, 1.3, q3, "#c6dbef")
    canvas.polyline([0.7, 1.3], [med, med], "#d62728", width=2.0)
    canvas.polyline([1.0, 1.0], [lo_w, q1], "#333", width=1.0)
    canvas.polyline([1.0, 1.0], [q3, hi_w], "#333", width=1.0)
    canvas.polyline([0.9, 1.1], [lo_w, lo_w], "#333", width=1.0)
    canvas.polyline([0.9, 1.1], [hi_w, hi_w], "#333", width=1.0)
    for v in values[(values < stats["fence_low"]) | (values > stats["fence_high"])]:
        canvas.circle(1.0, float(v), "#d62728")
    return canvas.write(path)
