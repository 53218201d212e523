"""Minimal SVG charts: scatter, line, segment and histogram layers on shared axes.

Output is a pure function of the inputs. Coordinates are printed with a fixed
number of decimals and no timestamps or ids are embedded, so identical data
gives byte-identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")
MARGIN = {"left": 52, "right": 12, "top": 26, "bottom": 34}


def _f(v: float) -> str:
    return f"{v:.2f}"


def nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return [lo]
    raw = (hi - lo) / max(n, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 5, 10) if s * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _fmt_tick(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.0e}"
    return f"{v:g}"


@dataclass
class Axes:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    equal: bool = False
    layers: list[tuple] = field(default_factory=list)
    legend: list[tuple[str, str]] = field(default_factory=list)

    def scatter(self, x, y, color=PALETTE[0], size=2.5, label=None, marker="circle", opacity=0.8):
        self.layers.append(("scatter", np.asarray(x, float), np.asarray(y, float), color, size, marker, opacity))
        if label:
            self.legend.append((label, color))

    def line(self, x, y, color=PALETTE[0], width=1.5, label=None, dash=None):
        self.layers.append(("line", np.asarray(x, float), np.asarray(y, float), color, width, dash))
        if label:
            self.legend.append((label, color))

    def segments(self, x0, y0, x1, y1, color="#888888", width=1.0, opacity=0.6):
        self.layers.append(
            ("segments", *(np.asarray(a, float) for a in (x0, y0, x1, y1)), color, width, opacity)
        )

    def bars(self, edges, counts, color=PALETTE[0], label=None):
        self.layers.append(("bars", np.asarray(edges, float), np.asarray(counts, float), color))
        if label:
            self.legend.append((label, color))

    def _bounds(self) -> tuple[float, float, float, float]:
        xs, ys = [], []
        for layer in self.layers:
            kind = layer[0]
            if kind in ("scatter", "line"):
                xs.append(layer[1])
                ys.append(layer[2])
            elif kind == "segments":
                xs += [layer[1], layer[3]]
                ys += [layer[2], layer[4]]
            elif kind == "bars":
                xs.append(layer[1])
                ys += [layer[2], np.zeros(1)]
        x = np.concatenate(xs) if xs else np.zeros(0)
        y = np.concatenate(ys) if ys else np.zeros(0)
        x, y = x[np.isfinite(x)], y[np.isfinite(y)]
        if len(x) == 0:
            x = np.array([0.0, 1.0])
        if len(y) == 0:
            y = np.array([0.0, 1.0])
        x0, x1, y0, y1 = x.min(), x.max(), y.min(), y.max()
        if x1 - x0 < 1e-12:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 - y0 < 1e-12:
            y0, y1 = y0 - 0.5, y1 + 0.5
        px, py = 0.05 * (x1 - x0), 0.05 * (y1 - y0)
        return x0 - px, x1 + px, y0 - py, y1 + py

    def render(self, ox: float, oy: float, w: float, h: float) -> str:
        x0, x1, y0, y1 = self._bounds()
        L, T = ox + MARGIN["left"], oy + MARGIN["top"]
        pw = w - MARGIN["left"] - MARGIN["right"]
        ph = h - MARGIN["top"] - MARGIN["bottom"]
        if self.equal:
            # Same units per pixel on both axes.
            sx, sy = pw / (x1 - x0), ph / (y1 - y0)
            s = min(sx, sy)
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            x0, x1 = cx - pw / s / 2, cx + pw / s / 2
            y0, y1 = cy - ph / s / 2, cy + ph / s / 2

        def X(v):
            return L + (v - x0) / (x1 - x0) * pw

        def Y(v):
            return T + ph - (v - y0) / (y1 - y0) * ph

        out = ["<g>"]
        out.append(f'<rect x="{_f(L)}" y="{_f(T)}" width="{_f(pw)}" height="{_f(ph)}" fill="white" stroke="#333"/>')
        for t in nice_ticks(x0, x1):
            out.append(f'<line x1="{_f(X(t))}" y1="{_f(T + ph)}" x2="{_f(X(t))}" y2="{_f(T + ph + 4)}" stroke="#333"/>')
            out.append(
                f'<text x="{_f(X(t))}" y="{_f(T + ph + 15)}" font-size="9" text-anchor="middle">{_fmt_tick(t)}</text>'
            )
        for t in nice_ticks(y0, y1):
            out.append(f'<line x1="{_f(L - 4)}" y1="{_f(Y(t))}" x2="{_f(L)}" y2="{_f(Y(t))}" stroke="#333"/>')
            out.append(
                f'<text x="{_f(L - 6)}" y="{_f(Y(t) + 3)}" font-size="9" text-anchor="end">{_fmt_tick(t)}</text>'
            )
        out.append(f'<clipPath id="c{int(ox)}_{int(oy)}"><rect x="{_f(L)}" y="{_f(T)}" width="{_f(pw)}" height="{_f(ph)}"/></clipPath>')
        out.append(f'<g clip-path="url(#c{int(ox)}_{int(oy)})">')
        for layer in self.layers:
            kind = layer[0]
            if kind == "scatter":
                _, xs, ys, color, size, marker, opacity = layer
                for a, b in zip(xs, ys):
                    if not (np.isfinite(a) and np.isfinite(b)):
                        continue
                    if marker == "cross":
                        u, v = X(a), Y(b)
                        out.append(
                            f'<path d="M{_f(u - size)} {_f(v - size)}L{_f(u + size)} {_f(v + size)}'
                            f'M{_f(u - size)} {_f(v + size)}L{_f(u + size)} {_f(v - size)}" stroke="{color}" stroke-width="1.5"/>'
                        )
                    else:
                        out.append(
                            f'<circle cx="{_f(X(a))}" cy="{_f(Y(b))}" r="{_f(size)}" fill="{color}" fill-opacity="{opacity}"/>'
                        )
            elif kind == "line":
                _, xs, ys, color, width, dash = layer
                ok = np.isfinite(xs) & np.isfinite(ys)
                if ok.sum() < 1:
                    continue
                pts = " ".join(f"{_f(X(a))},{_f(Y(b))}" for a, b in zip(xs[ok], ys[ok]))
                extra = f' stroke-dasharray="{dash}"' if dash else ""
                out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>')
            elif kind == "segments":
                _, a0, b0, a1, b1, color, width, opacity = layer
                for u0, v0, u1, v1 in zip(a0, b0, a1, b1):
                    out.append(
                        f'<line x1="{_f(X(u0))}" y1="{_f(Y(v0))}" x2="{_f(X(u1))}" y2="{_f(Y(v1))}" '
                        f'stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>'
                    )
            elif kind == "bars":
                _, edges, counts, color = layer
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    top, base = Y(max(c, 0.0)), Y(0.0)
                    out.append(
                        f'<rect x="{_f(X(lo))}" y="{_f(top)}" width="{_f(max(X(hi) - X(lo), 0.0))}" '
                        f'height="{_f(max(base - top, 0.0))}" fill="{color}" fill-opacity="0.7" stroke="white" stroke-width="0.5"/>'
                    )
        out.append("</g>")
        if self.title:
            out.append(
                f'<text x="{_f(L + pw / 2)}" y="{_f(oy + 16)}" font-size="11" text-anchor="middle">{escape(self.title)}</text>'
            )
        if self.xlabel:
            out.append(
                f'<text x="{_f(L + pw / 2)}" y="{_f(oy + h - 4)}" font-size="9" text-anchor="middle">{escape(self.xlabel)}</text>'
            )
        if self.ylabel:
            cx, cy = ox + 11, T + ph / 2
            out.append(
                f'<text x="{_f(cx)}" y="{_f(cy)}" font-size="9" text-anchor="middle" '
                f'transform="rotate(-90 {_f(cx)} {_f(cy)})">{escape(self.ylabel)}</text>'
            )
        for k, (label, color) in enumerate(self.legend):
            ly = T + 10 + 12 * k
            out.append(f'<rect x="{_f(L + 6)}" y="{_f(ly - 7)}" width="8" height="8" fill="{color}"/>')
            out.append(f'<text x="{_f(L + 18)}" y="{_f(ly)}" font-size="9">{escape(label)}</text>')
        out.append("</g>")
        return "\n".join(out)


def render_figure(axes: list[Axes], ncols: int | None = None, panel_w: int = 320, panel_h: int = 260) -> str:
    """Lay the panels out on a grid and return the SVG document text."""
    if not axes:
        raise ValueError("a figure needs at least one panel")
    ncols = ncols or len(axes)
    nrows = math.ceil(len(axes) / ncols)
    W, H = ncols * panel_w, nrows * panel_h
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
    ]
    for k, ax in enumerate(axes):
        r, c = divmod(k, ncols)
        parts.append(ax.render(c * panel_w, r * panel_h, panel_w, panel_h))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
