"""Self-contained SVG figures (no plotting dependency).

All coordinates are formatted with fixed precision so identical inputs
produce byte-identical files.
"""

from __future__ import annotations

import math

__all__ = [
    "render_event_study",
    "render_status_grid",
    "render_sensitivity_curve",
]

_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 55.0, 15.0, 30.0, 40.0


def _f(x: float) -> str:
    return f"{x:.2f}"


def _finite(vals):
    return [v for v in vals if v is not None and math.isfinite(v)]


class _Canvas:
    def __init__(self, width: float, height: float, title: str):
        self.width, self.height = width, height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
            f'viewBox="0 0 {width:.0f} {height:.0f}" font-family="monospace" font-size="11">',
            f'<rect width="{width:.0f}" height="{height:.0f}" fill="white"/>',
            f'<text x="{width / 2:.0f}" y="16" text-anchor="middle" font-size="13">{title}</text>',
        ]

    def line(self, x1, y1, x2, y2, color="black", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
            f'stroke="{color}" stroke-width="{width:g}"{d}/>'
        )

    def circle(self, x, y, r=3.0, color="black", fill="black"):
        self.parts.append(
            f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{r:g}" stroke="{color}" fill="{fill}"/>'
        )

    def rect(self, x, y, w, h, fill, opacity=1.0):
        o = f' fill-opacity="{opacity:g}"' if opacity != 1.0 else ""
        self.parts.append(
            f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" fill="{fill}"{o}/>'
        )

    def text(self, x, y, s, anchor="middle", size=10, color="black"):
        self.parts.append(
            f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}" font-size="{size}" '
            f'fill="{color}">{s}</text>'
        )

    def finish(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _scale(lo: float, hi: float, a: float, b: float):
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo

    def f(v: float) -> float:
        return a + (v - lo) / span * (b - a)

    return f


def render_event_study(
    rows: list[dict],
    path: str,
    *,
    title: str = "event study",
    holdout_periods: tuple = (),
    reference_period: int | None = 0,
    width: float = 560.0,
    height: float = 340.0,
) -> None:
    """Dynamic estimates with CI whiskers; holdout periods marked in blue,
    the reference period shaded."""
    c = _Canvas(width, height, title)
    xs = [r["period"] for r in rows]
    ys = _finite([r["estimate"] for r in rows])
    los = _finite([r.get("ci_low") for r in rows])
    his = _finite([r.get("ci_high") for r in rows])
    all_y = ys + los + his + [0.0]
    x_lo, x_hi = min(xs) - 0.5, max(xs) + 0.5
    y_lo, y_hi = min(all_y), max(all_y)
    pad = 0.08 * (y_hi - y_lo or 1.0)
    sx = _scale(x_lo, x_hi, _MARGIN_L, width - _MARGIN_R)
    sy = _scale(y_lo - pad, y_hi + pad, height - _MARGIN_B, _MARGIN_T)

    if reference_period is not None and x_lo <= reference_period <= x_hi:
        c.rect(sx(reference_period - 0.5), _MARGIN_T, sx(reference_period + 0.5) - sx(reference_period - 0.5),
               height - _MARGIN_T - _MARGIN_B, "#dddddd", opacity=0.6)
    c.line(sx(x_lo), sy(0.0), sx(x_hi), sy(0.0), color="#888888", dash="4,3")
    c.line(_MARGIN_L, _MARGIN_T, _MARGIN_L, height - _MARGIN_B, color="black")
    c.line(_MARGIN_L, height - _MARGIN_B, width - _MARGIN_R, height - _MARGIN_B, color="black")
    for v in (y_lo, 0.0, y_hi):
        c.text(_MARGIN_L - 6, sy(v) + 3, f"{v:.3g}", anchor="end", size=9)
    for r in rows:
        x = sx(r["period"])
        held = r["period"] in holdout_periods
        color = "#1f77b4" if held else "black"
        if r.get("ci_low") is not None and math.isfinite(r.get("ci_low", float("nan"))):
            c.line(x, sy(r["ci_low"]), x, sy(r["ci_high"]), color=color)
        c.circle(x, sy(r["estimate"]), 3.0, color=color, fill=color)
        c.text(x, height - _MARGIN_B + 14, str(r["period"]), size=9)
    c.text(width / 2, height - 8, "periods relative to adoption (1 = first treated period)", size=10)
    if holdout_periods:
        c.text(width - _MARGIN_R, _MARGIN_T - 6, "blue = holdout", anchor="end", size=9, color="#1f77b4")
    with open(path, "w") as fh:
        fh.write(c.finish())


def render_status_grid(codes, unit_ids, time_ids, path: str, *, title: str = "treatment status") -> None:
    """Unit-by-period grid: dark = treated, light = control, hatched gray = missing."""
    n, t = len(unit_ids), len(time_ids)
    cell = max(min(16.0, 420.0 / max(n, 1)), 3.0)
    width = _MARGIN_L + t * cell + _MARGIN_R + 90
    height = _MARGIN_T + n * cell + _MARGIN_B
    c = _Canvas(width, height, title)
    colors = {"T": "#08519c", "C": "#c6dbef", "M": "#bdbdbd"}
    for i in range(n):
        for j in range(t):
            c.rect(_MARGIN_L + j * cell, _MARGIN_T + i * cell, cell - 0.5, cell - 0.5,
                   colors[str(codes[i][j])])
    step = max(1, t // 10)
    for j in range(0, t, step):
        c.text(_MARGIN_L + j * cell + cell / 2, height - _MARGIN_B + 14, str(time_ids[j]), size=9)
    lx = _MARGIN_L + t * cell + 12
    for k, (code, label) in enumerate([("T", "treated"), ("C", "control"), ("M", "missing")]):
        c.rect(lx, _MARGIN_T + 16 * k, 10, 10, colors[code])
        c.text(lx + 16, _MARGIN_T + 16 * k + 9, label, anchor="start", size=9)
    with open(path, "w") as fh:
        fh.write(c.finish())


def render_sensitivity_curve(robust: dict, path: str, *, title: str = "robust confidence sets") -> None:
    """Horizontal interval per drift magnitude plus the breakdown marker.

    ``robust`` is the JSON-ready mapping with keys ``Mbar_grid``,
    ``intervals`` and ``breakdown``.
    """
    grid = robust["Mbar_grid"]
    intervals = robust["intervals"]
    c = _Canvas(560.0, 90.0 + 34.0 * len(grid), title)
    height = 90.0 + 34.0 * len(grid)
    vals = [v for iv in intervals for v in (iv["low"], iv["high"])] + [0.0]
    lo, hi = min(vals), max(vals)
    pad = 0.08 * (hi - lo or 1.0)
    sx = _scale(lo - pad, hi + pad, _MARGIN_L, 560.0 - _MARGIN_R)
    c.line(sx(0.0), _MARGIN_T, sx(0.0), height - _MARGIN_B, color="#888888", dash="4,3")
    for k, iv in enumerate(intervals):
        y = _MARGIN_T + 24 + 34.0 * k
        color = "#2ca02c" if k == 0 else "#d62728"
        c.line(sx(iv["low"]), y, sx(iv["high"]), y, color=color, width=5.0)
        center = (iv["low"] + iv["high"]) / 2
        c.circle(sx(center), y, 3.0, color="black", fill="black")
        c.text(_MARGIN_L - 6, y + 3, f'M={iv["magnitude"]:g}', anchor="end", size=9)
        c.text(560.0 - _MARGIN_R, y - 8, f'[{iv["low"]:.3g}, {iv["high"]:.3g}]', anchor="end", size=9)
    bd = robust.get("breakdown")
    label = "breakdown: not reached" if bd is None else f"breakdown M = {bd:.3g}"
    c.text(560.0 / 2, height - 10, label, size=10)
    with open(path, "w") as fh:
        fh.write(c.finish())
