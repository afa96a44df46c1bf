"""Minimal SVG line charts (no plotting dependency, byte-stable output)."""

from __future__ import annotations

from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 360
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 50


def _fmt(x):
    return f"{x:.2f}".rstrip("0").rstrip(".")


def _tick(v):
    return f"{v:.4g}"


def line_chart(points, title, xlabel, ylabel, ticks=5):
    """Render ``[(x, y), ...]`` as a polyline with labelled axes."""
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    x0, y0 = LEFT, TOP + ph
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{y0}" stroke="black"/>')
    out.append(f'<text x="{x0 + pw / 2}" y="{HEIGHT - 10}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{TOP + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 15 {TOP + ph / 2})">{escape(ylabel)}</text>')
    if not points:
        out.append(f'<text x="{x0 + pw / 2}" y="{TOP + ph / 2}" text-anchor="middle">no data</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    xmin, xmax = min(xs), max(xs)
    ymin, ymax = 0.0, max(ys)
    if xmax == xmin:
        xmax = xmin + 1
    if ymax == ymin:
        ymax = ymin + 1

    def sx(x):
        return x0 + (x - xmin) / (xmax - xmin) * pw

    def sy(y):
        return y0 - (y - ymin) / (ymax - ymin) * ph

    for i in range(ticks + 1):
        xv = xmin + (xmax - xmin) * i / ticks
        yv = ymin + (ymax - ymin) * i / ticks
        out.append(f'<text x="{_fmt(sx(xv))}" y="{y0 + 15}" text-anchor="middle">{_tick(xv)}</text>')
        out.append(f'<text x="{x0 - 5}" y="{_fmt(sy(yv) + 4)}" text-anchor="end">{_tick(yv)}</text>')
        out.append(f'<line x1="{x0}" y1="{_fmt(sy(yv))}" x2="{x0 + pw}" y2="{_fmt(sy(yv))}" '
                   f'stroke="#ddd"/>')
    path = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in points)
    out.append(f'<polyline fill="none" stroke="#1f4e9c" stroke-width="1.5" points="{path}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
