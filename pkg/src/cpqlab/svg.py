"""Dependency-free SVG learning-curve plots.

One chart, two polylines (discounted return and discounted cost over
training steps) and a dashed horizontal line at the cost limit.
"""

from __future__ import annotations

from pathlib import Path

WIDTH, HEIGHT = 640, 400
MARGIN = 54


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _scale(values, lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in values]


def learning_curve_svg(path, steps, returns, costs, limit: float,
                       title: str = "") -> None:
    if not steps:
        raise ValueError("cannot plot an empty learning curve")
    y_all = list(returns) + list(costs) + [limit]
    y_lo, y_hi = min(y_all), max(y_all)
    pad = 0.05 * (y_hi - y_lo if y_hi > y_lo else 1.0)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    x_lo, x_hi = min(steps), max(steps)

    xs = _scale(steps, x_lo, x_hi, MARGIN, WIDTH - MARGIN)
    y_ret = _scale(returns, y_lo, y_hi, HEIGHT - MARGIN, MARGIN)
    y_cost = _scale(costs, y_lo, y_hi, HEIGHT - MARGIN, MARGIN)
    (y_limit,) = _scale([limit], y_lo, y_hi, HEIGHT - MARGIN, MARGIN)

    def points(xv, yv):
        return " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xv, yv))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        # axes
        f'<path d="M {MARGIN} {MARGIN} V {HEIGHT - MARGIN} H {WIDTH - MARGIN}" '
        f'stroke="black" fill="none"/>',
        f'<text x="{WIDTH // 2}" y="{HEIGHT - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">training step</text>',
        f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 16}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="10">{_fmt(x_lo)}</text>',
        f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 16}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="10">{_fmt(x_hi)}</text>',
        f'<text x="{MARGIN - 6}" y="{HEIGHT - MARGIN}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{_fmt(y_lo)}</text>',
        f'<text x="{MARGIN - 6}" y="{MARGIN + 4}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{_fmt(y_hi)}</text>',
        # the two learning curves
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="2" '
        f'points="{points(xs, y_ret)}"/>',
        f'<polyline fill="none" stroke="#d62728" stroke-width="2" '
        f'points="{points(xs, y_cost)}"/>',
        # dashed constraint limit
        f'<line x1="{MARGIN}" y1="{_fmt(y_limit)}" x2="{WIDTH - MARGIN}" '
        f'y2="{_fmt(y_limit)}" stroke="black" stroke-dasharray="6,4"/>',
        # legend
        f'<text x="{WIDTH - MARGIN}" y="{MARGIN + 14}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11" fill="#1f77b4">return</text>',
        f'<text x="{WIDTH - MARGIN}" y="{MARGIN + 28}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11" fill="#d62728">cost</text>',
        f'<text x="{WIDTH - MARGIN}" y="{MARGIN + 42}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11">limit = {_fmt(limit)}</text>',
        "</svg>",
    ]
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
