"""Minimal SVG line and scatter charts, written as plain XML text."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f")
W, H, PAD = 640, 400, 56


def _finite(xs, ys):
    return [(x, y) for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]


def _bounds(values):
    lo, hi = min(values), max(values)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


class _Frame:
    def __init__(self, xs, ys):
        self.x0, self.x1 = _bounds(xs)
        self.y0, self.y1 = _bounds(ys)

    def px(self, x):
        return PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2 * PAD)

    def py(self, y):
        return H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2 * PAD)


def _axes(f: _Frame, title, xlabel, ylabel):
    parts = [
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2}" y="{PAD / 2}" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
    ]
    for k in range(5):
        xv = f.x0 + (f.x1 - f.x0) * k / 4
        yv = f.y0 + (f.y1 - f.y0) * k / 4
        parts.append(f'<text x="{f.px(xv):.1f}" y="{H - PAD + 16}" text-anchor="middle" font-size="10">{xv:.3g}</text>')
        parts.append(f'<text x="{PAD - 6}" y="{f.py(yv) + 3:.1f}" text-anchor="end" font-size="10">{yv:.3g}</text>')
    return parts


def _legend(names):
    return [
        f'<rect x="{W - PAD - 110}" y="{PAD + 6 + 16 * k}" width="10" height="10" fill="{PALETTE[k % len(PALETTE)]}"/>'
        f'<text x="{W - PAD - 95}" y="{PAD + 15 + 16 * k}" font-size="11">{escape(str(n))}</text>'
        for k, n in enumerate(names)
    ]


def _document(parts):
    body = "\n".join(parts)
    return f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">\n{body}\n</svg>\n'


def line_chart(series: dict, title="", xlabel="", ylabel="") -> str:
    """``series`` maps a label to ``(xs, ys)``; non-finite points are skipped."""
    cleaned = {k: _finite(*v) for k, v in series.items()}
    pts = [p for v in cleaned.values() for p in v]
    if not pts:
        pts = [(0.0, 0.0)]
    f = _Frame([p[0] for p in pts], [p[1] for p in pts])
    parts = _axes(f, title, xlabel, ylabel)
    for k, (name, data) in enumerate(cleaned.items()):
        if not data:
            continue
        d = " ".join(f"{f.px(x):.2f},{f.py(y):.2f}" for x, y in data)
        parts.append(f'<polyline fill="none" stroke="{PALETTE[k % len(PALETTE)]}" stroke-width="1.5" points="{d}"/>')
    parts += _legend(list(cleaned))
    return _document(parts)


def scatter_chart(groups: dict, title="", xlabel="", ylabel="") -> str:
    """``groups`` maps a label to ``(xs, ys)``."""
    cleaned = {k: _finite(*v) for k, v in groups.items()}
    pts = [p for v in cleaned.values() for p in v] or [(0.0, 0.0)]
    f = _Frame([p[0] for p in pts], [p[1] for p in pts])
    parts = _axes(f, title, xlabel, ylabel)
    for k, (name, data) in enumerate(cleaned.items()):
        color = PALETTE[k % len(PALETTE)]
        parts += [f'<circle cx="{f.px(x):.2f}" cy="{f.py(y):.2f}" r="2.5" fill="{color}" fill-opacity="0.6"/>' for x, y in data]
    parts += _legend(list(cleaned))
    return _document(parts)


def learning_curve_svg(rows: list[dict]) -> str:
    """Eval return against env steps, plus the training loss terms."""
    steps = [r["env_steps"] for r in rows]
    ev = [(r["env_steps"], r["eval_return"]) for r in rows if math.isfinite(r["eval_return"])]
    series = {"eval_return": ([p[0] for p in ev], [p[1] for p in ev]), "l_td": (steps, [r["l_td"] for r in rows])}
    return line_chart(series, "learning curve", "env steps", "value")


def role_scatter_svg(role_rows: list[dict], dims=(0, 1)) -> str:
    """Role means coloured by duty label, two of the three coordinates at a time."""
    a, b = dims
    groups: dict = {}
    for r in role_rows:
        xs, ys = groups.setdefault(r["duty_label"], ([], []))
        xs.append(r[f"mu{a}"])
        ys.append(r[f"mu{b}"])
    return scatter_chart(dict(sorted(groups.items())), f"role means (mu{a}, mu{b})", f"mu{a}", f"mu{b}")
