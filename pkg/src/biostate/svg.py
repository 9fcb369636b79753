"""Minimal deterministic SVG emission shared by the plotting functions."""
from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)

NEUTRAL = (247, 247, 247)
WARM = (178, 24, 43)
COOL = (33, 102, 172)
Z_CLIP = 3.0


def num(x: float) -> str:
    """Fixed two-decimal coordinates keep output byte-stable."""
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def hex_color(rgb) -> str:
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def diverging_color(z: float, clip: float = Z_CLIP) -> str:
    """Linear blend from neutral toward warm (z > 0) or cool (z < 0), saturating at |z| = clip."""
    t = max(-1.0, min(1.0, z / clip))
    end = WARM if t > 0 else COOL
    a = abs(t)
    return hex_color(tuple(int(round(n + (e - n) * a)) for n, e in zip(NEUTRAL, end)))


class Document:
    def __init__(self, width: float, height: float, comment: str | None = None):
        self.width = width
        self.height = height
        self.parts: list[str] = []
        self.comment = comment

    def add(self, element: str) -> None:
        self.parts.append(element)

    def line(self, x1, y1, x2, y2, stroke="#333333", width=1.0) -> None:
        self.add(
            f'<line x1="{num(x1)}" y1="{num(y1)}" x2="{num(x2)}" y2="{num(y2)}" '
            f'stroke="{stroke}" stroke-width="{num(width)}"/>'
        )

    def rect(self, x, y, w, h, fill, stroke="none") -> None:
        self.add(
            f'<rect x="{num(x)}" y="{num(y)}" width="{num(w)}" height="{num(h)}" '
            f'fill="{fill}" stroke="{stroke}"/>'
        )

    def circle(self, cx, cy, r, fill, opacity=0.8) -> None:
        self.add(f'<circle cx="{num(cx)}" cy="{num(cy)}" r="{num(r)}" fill="{fill}" fill-opacity="{opacity}"/>')

    def text(self, x, y, content, size=10, anchor="start", rotate=None) -> None:
        transform = f' transform="rotate({rotate} {num(x)} {num(y)})"' if rotate is not None else ""
        self.add(
            f'<text x="{num(x)}" y="{num(y)}" font-size="{size}" font-family="sans-serif" '
            f'text-anchor="{anchor}"{transform}>{escape(str(content))}</text>'
        )

    def render(self) -> str:
        head = ['<?xml version="1.0" encoding="UTF-8"?>']
        if self.comment:
            head.append(f"<!-- {escape(self.comment).replace('--', '- -')} -->")
        head.append(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{num(self.width)}" '
            f'height="{num(self.height)}" viewBox="0 0 {num(self.width)} {num(self.height)}">'
        )
        return "\n".join(head + self.parts + ["</svg>"]) + "\n"
