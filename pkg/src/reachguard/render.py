"""Deterministic SVG rendering of scenario frames.

Pure string assembly: identical inputs give byte-identical files (no
timestamps, no dict-order dependence, fixed float formatting), so frames
can be diffed across runs and pinned in tests.
"""

from __future__ import annotations

import math

import numpy as np

from .dynamics import AgentState
from .safety import OccupancyGrid2D

VEHICLE_LENGTH = 4.5  # m
VEHICLE_WIDTH = 2.0  # m


def _fmt(x: float) -> str:
    s = f"{float(x):.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


class _Canvas:
    """World-to-pixel mapping with the y axis flipped for SVG."""

    def __init__(self, x0, x1, y0, y1, scale=8.0, pad=20.0):
        self.x0, self.y1 = x0, y1
        self.scale = scale
        self.pad = pad
        self.width = (x1 - x0) * scale + 2 * pad
        self.height = (y1 - y0) * scale + 2 * pad

    def px(self, x: float) -> float:
        return self.pad + (x - self.x0) * self.scale

    def py(self, y: float) -> float:
        return self.pad + (self.y1 - y) * self.scale


def _rect_path(canvas: _Canvas, cx, cy, length, width, theta) -> str:
    hl, hw = length / 2.0, width / 2.0
    c, s = math.cos(theta), math.sin(theta)
    pts = []
    for bx, by in ((-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)):
        wx = cx + c * bx - s * by
        wy = cy + s * bx + c * by
        pts.append(f"{_fmt(canvas.px(wx))},{_fmt(canvas.py(wy))}")
    return " ".join(pts)


def _cells_svg(canvas: _Canvas, occ: OccupancyGrid2D, fill: str,
               opacity: str) -> list:
    out = [f'<g fill="{fill}" fill-opacity="{opacity}" stroke="none">']
    side = occ.cell * canvas.scale
    ii, jj = np.nonzero(occ.occupied)
    for i, j in zip(ii.tolist(), jj.tolist()):
        wx = occ.origin[0] + i * occ.cell
        wy = occ.origin[1] + (j + 1) * occ.cell  # top edge in world y
        out.append(
            f'<rect x="{_fmt(canvas.px(wx))}" y="{_fmt(canvas.py(wy))}" '
            f'width="{_fmt(side)}" height="{_fmt(side)}"/>'
        )
    out.append("</g>")
    return out


def render_frame(human: AgentState | None, ego_x: float | None,
                 occupancy: OccupancyGrid2D | None = None,
                 dilated: OccupancyGrid2D | None = None,
                 line_x: float | None = None,
                 lane_half_width: float = 3.5,
                 view: tuple = (-10.0, 120.0, -30.0, 30.0),
                 labels: tuple = ()) -> str:
    """Render one scenario frame to an SVG string.

    The ego drives the y = 0 centerline; the human pose, the projected
    tube occupancy, and its dilation are drawn when given. `labels` is a
    tuple of text lines placed in the top-left corner.
    """
    canvas = _Canvas(*view)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{_fmt(canvas.width)}" height="{_fmt(canvas.height)}" '
        f'viewBox="0 0 {_fmt(canvas.width)} {_fmt(canvas.height)}">',
        f'<rect width="{_fmt(canvas.width)}" height="{_fmt(canvas.height)}" '
        f'fill="#fafafa"/>',
    ]
    # lane edges around the ego centerline
    for y in (-lane_half_width, lane_half_width):
        parts.append(
            f'<line x1="{_fmt(canvas.px(view[0]))}" y1="{_fmt(canvas.py(y))}" '
            f'x2="{_fmt(canvas.px(view[1]))}" y2="{_fmt(canvas.py(y))}" '
            f'stroke="#999999" stroke-width="1"/>'
        )
    if line_x is not None:
        parts.append(
            f'<line x1="{_fmt(canvas.px(line_x))}" '
            f'y1="{_fmt(canvas.py(-lane_half_width))}" '
            f'x2="{_fmt(canvas.px(line_x))}" '
            f'y2="{_fmt(canvas.py(lane_half_width))}" '
            f'stroke="#cc3333" stroke-width="2" stroke-dasharray="6,4"/>'
        )
    if dilated is not None:
        parts.extend(_cells_svg(canvas, dilated, "#f2b04c", "0.25"))
    if occupancy is not None:
        parts.extend(_cells_svg(canvas, occupancy, "#d94f2b", "0.55"))
    if ego_x is not None:
        parts.append(
            f'<polygon points="{_rect_path(canvas, ego_x, 0.0, VEHICLE_LENGTH, VEHICLE_WIDTH, 0.0)}" '
            f'fill="#2b6cd9" stroke="#1a4488" stroke-width="1"/>'
        )
    if human is not None:
        parts.append(
            f'<polygon points="{_rect_path(canvas, human.x, human.y, VEHICLE_LENGTH, VEHICLE_WIDTH, human.theta)}" '
            f'fill="#3c9d4e" stroke="#256633" stroke-width="1"/>'
        )
    for k, text in enumerate(labels):
        parts.append(
            f'<text x="{_fmt(canvas.pad)}" y="{_fmt(canvas.pad + 14.0 * (k + 1))}" '
            f'font-family="monospace" font-size="12" fill="#222222">{text}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_frame(path, **kwargs):
    svg = render_frame(**kwargs)
    with open(path, "w") as f:
        f.write(svg)
    return path
