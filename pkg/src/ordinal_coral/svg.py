"""Minimal static SVG charts: latent scatter, importance bars, confusion heatmap."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

# one colour per risk grade, low to high
GRADE_COLORS = ("#1b9e77", "#66a61e", "#e6ab02", "#d95f02", "#d7191c",
                "#7570b3", "#e7298a", "#a6761d", "#666666", "#1f78b4")


def _fmt(v):
    return f"{v:.2f}".rstrip("0").rstrip(".")


class Svg:
    def __init__(self, width, height):
        self.width, self.height = width, height
        self.parts = []

    def rect(self, x, y, w, h, fill, stroke=None):
        s = f' stroke="{stroke}"' if stroke else ""
        self.parts.append(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" '
                          f'height="{_fmt(h)}" fill="{fill}"{s}/>')

    def circle(self, x, y, r, fill, opacity=0.8):
        self.parts.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r)}" '
                          f'fill="{fill}" fill-opacity="{opacity}"/>')

    def line(self, x1, y1, x2, y2, stroke="#333"):
        self.parts.append(f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" '
                          f'y2="{_fmt(y2)}" stroke="{stroke}"/>')

    def text(self, x, y, s, size=11, anchor="start", fill="#222", rotate=None):
        t = f' transform="rotate({rotate} {_fmt(x)} {_fmt(y)})"' if rotate is not None else ""
        self.parts.append(f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
                          f'font-family="sans-serif" text-anchor="{anchor}" fill="{fill}"{t}>'
                          f'{escape(str(s))}</text>')

    def render(self):
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
                f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">')
        body = [head, f'<rect width="100%" height="100%" fill="white"/>', *self.parts, "</svg>"]
        return "\n".join(body) + "\n"


def _scale(values, lo_px, hi_px):
    v = np.asarray(values, dtype=np.float64)
    finite = v[np.isfinite(v)]
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return lo_px + (v - lo) / (hi - lo) * (hi_px - lo_px), (lo, hi)


def latent_scatter(points, grades=None, title="Latent space", dims=(0, 1)):
    """2-D scatter of latent coordinates coloured by grade."""
    pts = np.asarray(points, dtype=np.float64)
    svg = Svg(520, 460)
    left, right, top, bottom = 60, 420, 40, 400
    keep = np.all(np.isfinite(pts[:, list(dims)]), axis=1)
    xs, (x0, x1) = _scale(pts[keep, dims[0]], left, right)
    ys, (y0, y1) = _scale(pts[keep, dims[1]], bottom, top)
    svg.text(260, 22, title, size=14, anchor="middle")
    svg.rect(left, top, right - left, bottom - top, "none", stroke="#999")
    svg.text((left + right) / 2, bottom + 32, f"dim {dims[0]}", anchor="middle")
    svg.text(left - 38, (top + bottom) / 2, f"dim {dims[1]}", anchor="middle", rotate=-90)
    svg.text(left, bottom + 16, f"{x0:.3g}")
    svg.text(right, bottom + 16, f"{x1:.3g}", anchor="end")
    svg.text(left - 4, bottom, f"{y0:.3g}", anchor="end")
    svg.text(left - 4, top + 10, f"{y1:.3g}", anchor="end")
    g = None if grades is None else np.asarray(grades)[keep]
    # draw the common grades first so rare high-risk points stay visible
    order = np.arange(xs.size) if g is None else np.argsort(g, kind="stable")
    for i in order:
        color = "#1f78b4" if g is None else GRADE_COLORS[int(g[i]) % len(GRADE_COLORS)]
        svg.circle(xs[i], ys[i], 3, color)
    if g is not None:
        for k, level in enumerate(np.unique(g)):
            svg.circle(440, top + 12 + 18 * k, 5, GRADE_COLORS[int(level) % len(GRADE_COLORS)], 1.0)
            svg.text(452, top + 16 + 18 * k, f"grade {int(level)}")
    return svg.render()


def importance_bars(names, values, title="Importance (drop in balanced accuracy)", top=15):
    """Horizontal bars for the ``top`` largest values."""
    vals = np.nan_to_num(np.asarray(values, dtype=np.float64))
    order = np.argsort(-vals, kind="stable")[:top]
    row, left, width = 22, 170, 300
    svg = Svg(left + width + 80, 60 + row * len(order))
    svg.text(svg.width / 2, 22, title, size=14, anchor="middle")
    span = max(np.abs(vals[order]).max() if order.size else 0.0, 1e-12)
    zero = left + (width / 2 if vals[order].min(initial=0) < 0 else 0)
    scale = (width / 2 if zero > left else width) / span
    for r, j in enumerate(order):
        y = 40 + r * row
        v = vals[j]
        x = zero if v >= 0 else zero + v * scale
        svg.rect(x, y, abs(v) * scale, row - 6, "#3182bd" if v >= 0 else "#de2d26")
        svg.text(left - 6, y + row - 10, names[j], anchor="end")
        svg.text(zero + max(v, 0) * scale + 4, y + row - 10, f"{v:.3f}", size=10)
    svg.line(zero, 36, zero, 40 + row * len(order))
    return svg.render()


def confusion_heatmap(cm, title="Confusion matrix"):
    cm = np.asarray(cm)
    k = cm.shape[0]
    cell, left, top = 56, 80, 60
    svg = Svg(left + cell * k + 30, top + cell * k + 50)
    svg.text(svg.width / 2, 22, title, size=14, anchor="middle")
    svg.text(left + cell * k / 2, 46, "predicted grade", anchor="middle")
    svg.text(24, top + cell * k / 2, "true grade", anchor="middle", rotate=-90)
    # row-normalised shading so rare grades are readable
    rows = cm.sum(axis=1, keepdims=True)
    frac = np.divide(cm, rows, out=np.zeros(cm.shape), where=rows > 0)
    for i in range(k):
        svg.text(left - 8, top + i * cell + cell / 2 + 4, i, anchor="end")
        svg.text(left + i * cell + cell / 2, top + cell * k + 16, i, anchor="middle")
        for j in range(k):
            shade = int(round(255 - 200 * frac[i, j]))
            svg.rect(left + j * cell, top + i * cell, cell, cell, f"rgb({shade},{shade},255)", "#fff")
            svg.text(left + j * cell + cell / 2, top + i * cell + cell / 2 + 4, int(cm[i, j]),
                     anchor="middle", fill="#fff" if frac[i, j] > 0.6 else "#222")
    return svg.render()
