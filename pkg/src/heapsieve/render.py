"""Text and SVG pictures of a heap snapshot.

Blocks are drawn in offset order: arena first, then the mapped region.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

SVG_MAX_WIDTH = 4096
SVG_HEIGHT = 32

_LETTER = {"alloc": "A", "free": "F", "slack": "S"}
_FILL = {"alloc": "#4c78a8", "free": "#e0e0e0", "slack": "#bab0ac", "mapped": "#72b7b2"}
_MARKED = {"fst": "#e45756", "snd": "#f58518"}


def _letter(block):
    if block.region == "mapped":
        return "M"
    return _LETTER.get(block.state, "?")


def render_ascii(snapshot) -> str:
    """One ``[X:bytes]`` cell per block, e.g. ``[A:32][F:96]``."""
    return "".join(f"[{_letter(b)}:{b.footprint}]" for b in snapshot)


def _fill(block):
    if block.tag in _MARKED:
        return _MARKED[block.tag]
    if block.region == "mapped":
        return _FILL["mapped"]
    return _FILL.get(block.state, "#000000")


def render_svg(snapshot, alignment=8, max_width=SVG_MAX_WIDTH) -> str:
    """An SVG strip at one pixel per ``alignment`` bytes.

    Blocks past ``max_width`` pixels are dropped and a hatched marker stating
    how many were elided closes the strip.
    """
    widths = [max(1, b.footprint // alignment) for b in snapshot]
    marker_w = 24
    budget = max_width if sum(widths) <= max_width else max_width - marker_w
    rects, x, shown = [], 0, 0
    for b, w in zip(snapshot, widths):
        if x + w > budget:
            break
        title = f"{_letter(b)} {b.footprint} bytes at {b.offset:#x}" + (f" ({b.tag})" if b.tag else "")
        rects.append(
            f'<rect x="{x}" y="0" width="{w}" height="{SVG_HEIGHT}" fill="{_fill(b)}" stroke="#333333" '
            f'stroke-width="0.5"><title>{escape(title)}</title></rect>'
        )
        x += w
        shown += 1
    width = x
    elided = len(snapshot) - shown
    if elided:
        rects.append(
            f'<g class="elided"><rect x="{x}" y="0" width="{marker_w}" height="{SVG_HEIGHT}" '
            f'fill="url(#hatch)"/><title>{elided} more blocks elided</title></g>'
        )
        width = x + marker_w
    width = max(width, 1)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {width} {SVG_HEIGHT}">\n'
        '<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)">'
        '<rect width="6" height="6" fill="#ffffff"/><line x1="0" y1="0" x2="0" y2="6" stroke="#333333" stroke-width="2"/>'
        "</pattern></defs>\n" + "\n".join(rects) + "\n</svg>\n"
    )
