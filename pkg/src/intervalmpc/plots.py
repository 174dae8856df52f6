"""Static SVG figures written directly, one panel per plotted component."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, PANEL_H, MARGIN = 640, 180, 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _finite_range(arrays):
    vals = np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays])
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return -1.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Panel:
    def __init__(self, top: float, t, series, title: str):
        self.top = top
        self.t0, self.t1 = float(t[0]), float(t[-1]) if len(t) > 1 else float(t[0]) + 1.0
        self.y0, self.y1 = _finite_range(series)
        self.title = title

    def x(self, t):
        return MARGIN + (np.asarray(t) - self.t0) / max(self.t1 - self.t0, 1e-300) * (WIDTH - 2 * MARGIN)

    def y(self, v):
        v = np.clip(np.asarray(v, dtype=float), self.y0, self.y1)
        return self.top + PANEL_H - 20 - (v - self.y0) / (self.y1 - self.y0) * (PANEL_H - 40)

    def frame(self) -> list:
        x0, x1 = MARGIN, WIDTH - MARGIN
        ya, yb = self.top + 20, self.top + PANEL_H - 20
        return [f'<rect x="{x0}" y="{ya}" width="{x1 - x0}" height="{yb - ya}" fill="none" stroke="#888"/>',
                f'<text x="{x0}" y="{self.top + 14}" font-size="12">{escape(self.title)}</text>',
                f'<text x="4" y="{ya + 10}" font-size="9">{self.y1:.3g}</text>',
                f'<text x="4" y="{yb}" font-size="9">{self.y0:.3g}</text>',
                f'<text x="{x1 - 30}" y="{yb + 14}" font-size="9">t={self.t1:.3g}</text>']

    def line(self, t, v, color, width=1.2) -> str:
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(self.x(t), self.y(v)) if np.isfinite(b))
        return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"/>'

    def band(self, t, lo, hi, color) -> str:
        xs, yl, yh = self.x(t), self.y(lo), self.y(hi)
        pts = [f"{a:.2f},{b:.2f}" for a, b in zip(xs, yh)] + [f"{a:.2f},{b:.2f}" for a, b in zip(xs[::-1], yl[::-1])]
        return f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.25" stroke="none"/>'


def _thin(t, *arrays, limit=1500):
    step = max(1, len(t) // limit)
    return (np.asarray(t)[::step],) + tuple(np.asarray(a)[::step] for a in arrays)


def _document(panels: list, body: list) -> str:
    h = PANEL_H * len(panels)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{h}" viewBox="0 0 {WIDTH} {h}">\n'
            + "\n".join(body) + "\n</svg>\n")


def funnel_svg(funnels: dict, x_true=None, t_true=None, title: str = "interval prediction", focus=None) -> str:
    """Bands ``lo..hi`` per state component for each named funnel ``(t, lo, hi)``.

    The vertical range covers the funnels named in ``focus`` (all by
    default) and the true state; other funnels are clipped to it.
    """
    p = next(iter(funnels.values()))[1].shape[1]
    ranged = [f for name, f in funnels.items() if focus is None or name in focus] or list(funnels.values())
    body, panels = [], []
    for i in range(p):
        series = [f[1][:, i] for f in ranged] + [f[2][:, i] for f in ranged]
        if x_true is not None:
            series.append(np.asarray(x_true)[:, i])
        ts = np.concatenate([np.asarray(f[0]) for f in funnels.values()])
        panel = _Panel(i * PANEL_H, np.sort(ts), series, f"{title}: x{i}")
        panels.append(panel)
        body += panel.frame()
        for c, (name, (t, lo, hi)) in enumerate(funnels.items()):
            t, lo, hi = _thin(t, lo[:, i], hi[:, i])
            body.append(panel.band(t, lo, hi, COLORS[c % len(COLORS)]))
            body.append(panel.line(t, lo, COLORS[c % len(COLORS)], 0.8))
            body.append(panel.line(t, hi, COLORS[c % len(COLORS)], 0.8))
            body.append(f'<text x="{WIDTH - MARGIN - 80}" y="{panel.top + 14 + 12 * c}" font-size="10" '
                        f'fill="{COLORS[c % len(COLORS)]}">{escape(name)}</text>')
        if x_true is not None:
            t, xv = _thin(t_true, np.asarray(x_true)[:, i])
            body.append(panel.line(t, xv, "#000000"))
    return _document(panels, body)


def run_svg(log) -> str:
    """States with their intervals, the control, ``V`` against the level, and the parameter box."""
    a = log.arrays()
    t = a["t"]
    funnels = {"interval": (t, a["x_lo"], a["x_hi"])}
    state = funnel_svg(funnels, a["x"], t, "closed loop")
    # extra panels appended below the state panels
    p = a["x"].shape[1]
    body, panels = [], []
    top = p * PANEL_H
    extra = [("u", [a["u"][:, j] for j in range(a["u"].shape[1])]),
             ("V and level", [a["V"], a["level"]])]
    for j in range(a["box_lo"].shape[1]):
        extra.append((f"theta{j} box", [a["box_lo"][:, j], a["box_hi"][:, j], a["theta_hat"][:, j]]))
    for k, (name, series) in enumerate(extra):
        panel = _Panel(top + k * PANEL_H, t, series, name)
        panels.append(panel)
        body += panel.frame()
        for c, s in enumerate(series):
            tt, ss = _thin(t, s)
            body.append(panel.line(tt, ss, COLORS[c % len(COLORS)]))
    inner = state.split("\n")[1:-2]
    h = (p + len(extra)) * PANEL_H
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{h}" viewBox="0 0 {WIDTH} {h}">\n'
            + "\n".join(inner + body) + "\n</svg>\n")
