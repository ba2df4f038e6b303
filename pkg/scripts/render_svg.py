#!/usr/bin/env python3
"""
Deterministic SVG rendering of layouts, plans and KDE grids.

The table border is drawn as a path, so a rendered layout contains exactly
one <rect> per object. KDE heatmaps are rendered to PNG with Pillow and
embedded as a base64 data URI.
"""

import base64
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np
from PIL import Image

from layout_model import CategoryVocab, DataError, Layout, ObjectCondition

try:
    import cairosvg
    HAS_CAIROSVG = True
except ImportError:
    HAS_CAIROSVG = False

logger = logging.getLogger(__name__)

OVERLAYS = ('layout', 'plan-arrows', 'kde-heatmap')

PALETTE = (
    '#4e79a7', '#f28e2b', '#e15759', '#76b7b2', '#59a14f',
    '#edc948', '#b07aa1', '#ff9da7', '#9c755f', '#bab0ac',
)


@dataclass(frozen=True)
class RenderSpec:
    canvas: int = 512
    colors: dict[str, str] = field(default_factory=dict)
    stroke: str = '#333333'
    stroke_width: float = 1.5
    overlay: str = 'layout'

    def __post_init__(self):
        if self.canvas < 128:
            raise DataError(f"Canvas must be at least 128 px, got {self.canvas}")
        if self.overlay not in OVERLAYS:
            raise DataError(f"Unknown overlay mode '{self.overlay}' (expected one of {', '.join(OVERLAYS)})")

    def color_map(self, vocab: CategoryVocab) -> dict[str, str]:
        """Explicit colors where given, the palette (by label) elsewhere."""
        return {
            name: self.colors.get(name, PALETTE[index % len(PALETTE)])
            for index, name in enumerate(vocab.names)
        }


class _Frame:
    """Maps normalized table coordinates (y up) to pixels (y down)."""

    def __init__(self, spec: RenderSpec, extent: Sequence[float], window: float = 1.0, pad: int = 10):
        self.width = spec.canvas
        self.height = max(1, round(spec.canvas * extent[1] / extent[0]))
        self.window = window
        self.pad = pad

    def x(self, value: float) -> float:
        return self.pad + (value + self.window) / (2 * self.window) * (self.width - 2 * self.pad)

    def y(self, value: float) -> float:
        return self.pad + (self.window - value) / (2 * self.window) * (self.height - 2 * self.pad)

    def sx(self, size: float) -> float:
        return size / (2 * self.window) * (self.width - 2 * self.pad)

    def sy(self, size: float) -> float:
        return size / (2 * self.window) * (self.height - 2 * self.pad)


def _f(value: float) -> str:
    return f"{value:.2f}"


def _open(frame: _Frame) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{frame.width}" height="{frame.height}" '
        f'viewBox="0 0 {frame.width} {frame.height}">',
        '<marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="6" markerHeight="6" '
        'orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="#222222"/></marker>',
    ]


def _table_border(frame: _Frame, spec: RenderSpec, edge: float = 1.0) -> str:
    x0, x1 = frame.x(-edge), frame.x(edge)
    y0, y1 = frame.y(edge), frame.y(-edge)
    return (f'<path class="table" d="M{_f(x0)},{_f(y0)} H{_f(x1)} V{_f(y1)} H{_f(x0)} Z" '
            f'fill="none" stroke="{spec.stroke}" stroke-width="{_f(spec.stroke_width * 2)}"/>')


def _objects(frame, spec, conditions, layout, vocab) -> list[str]:
    colors = spec.color_map(vocab)
    parts = []
    for index, (c, (x, y)) in enumerate(zip(conditions, layout.positions)):
        name = vocab.entries[c.label].name if c.label < len(vocab) else f"label-{c.label}"
        w, h = frame.sx(c.size[0]), frame.sy(c.size[1])
        parts.append(
            f'<rect x="{_f(frame.x(x) - w / 2)}" y="{_f(frame.y(y) - h / 2)}" width="{_f(w)}" height="{_f(h)}" '
            f'fill="{colors.get(name, PALETTE[0])}" fill-opacity="0.6" stroke="{spec.stroke}" '
            f'stroke-width="{_f(spec.stroke_width)}"/>'
        )
        parts.append(
            f'<text x="{_f(frame.x(x))}" y="{_f(frame.y(y))}" font-family="sans-serif" font-size="10" '
            f'text-anchor="middle" dominant-baseline="middle">{escape(f"{index}:{name}")}</text>'
        )
    return parts


def render_layout(conditions: Sequence[ObjectCondition], layout: Layout, vocab: CategoryVocab,
                  spec: RenderSpec = RenderSpec()) -> str:
    """Table border plus one labelled rectangle per object."""
    if len(conditions) != len(layout):
        raise DataError(f"{len(conditions)} conditions but {len(layout)} positions")
    frame = _Frame(spec, vocab.table_extent_m)
    parts = _open(frame)
    parts.append(_table_border(frame, spec))
    parts.extend(_objects(frame, spec, conditions, layout, vocab))
    parts.append('</svg>')
    return '\n'.join(parts) + '\n'


def render_plan(plan, conditions: Sequence[ObjectCondition], initial: Layout, vocab: CategoryVocab,
                spec: RenderSpec = RenderSpec()) -> str:
    """The initial layout with one numbered arrow per plan action."""
    if len(conditions) != len(initial):
        raise DataError(f"{len(conditions)} conditions but {len(initial)} positions")
    frame = _Frame(spec, vocab.table_extent_m)
    parts = _open(frame)
    parts.append(_table_border(frame, spec))
    parts.extend(_objects(frame, spec, conditions, initial, vocab))
    for step, action in enumerate(plan.actions):
        (x0, y0), (x1, y1) = action.source, action.target
        dash = ' stroke-dasharray="4,3"' if action.kind == 'move-away' else ''
        parts.append(
            f'<line class="{action.kind}" x1="{_f(frame.x(x0))}" y1="{_f(frame.y(y0))}" '
            f'x2="{_f(frame.x(x1))}" y2="{_f(frame.y(y1))}" stroke="#222222" stroke-width="1.5"'
            f'{dash} marker-end="url(#arrow)"/>'
        )
        parts.append(
            f'<text x="{_f(frame.x((x0 + x1) / 2))}" y="{_f(frame.y((y0 + y1) / 2))}" font-family="sans-serif" '
            f'font-size="9" fill="#222222">{step + 1}</text>'
        )
    parts.append('</svg>')
    return '\n'.join(parts) + '\n'


def heatmap_png(density: np.ndarray) -> bytes:
    """Grayscale-to-red PNG of a density grid; row 0 is the lowest y."""
    density = np.asarray(density, dtype=np.float64)
    peak = density.max()
    scaled = density / peak if peak > 0 else np.zeros_like(density)
    level = np.flipud(np.round(255 * scaled)).astype(np.uint8)
    rgb = np.stack([np.full_like(level, 255), 255 - level, 255 - level], axis=-1)
    buffer = io.BytesIO()
    Image.fromarray(rgb).save(buffer, format='PNG')
    return buffer.getvalue()


def render_kde(grid, spec: RenderSpec = RenderSpec(), label: str = '') -> str:
    """Heatmap of a KDE grid with the table outline for scale."""
    centers = np.asarray(grid.centers)
    step = centers[1] - centers[0] if centers.size > 1 else 1.0
    window = float(max(abs(centers[0]), abs(centers[-1])) + step / 2)
    frame = _Frame(spec, (1.0, 1.0), window=window)
    encoded = base64.b64encode(heatmap_png(grid.density)).decode('ascii')
    x0, y0 = frame.x(-window), frame.y(window)
    parts = _open(frame)
    parts.append(
        f'<image x="{_f(x0)}" y="{_f(y0)}" width="{_f(frame.sx(2 * window))}" height="{_f(frame.sy(2 * window))}" '
        f'preserveAspectRatio="none" href="data:image/png;base64,{encoded}"/>'
    )
    parts.append(_table_border(frame, spec))
    parts.append(
        f'<circle cx="{_f(frame.x(0.0))}" cy="{_f(frame.y(0.0))}" r="3" fill="{spec.stroke}"/>'
    )
    if label:
        parts.append(f'<text x="{frame.pad + 4}" y="{frame.pad + 12}" font-family="sans-serif" '
                     f'font-size="12">{escape(label)}</text>')
    parts.append('</svg>')
    return '\n'.join(parts) + '\n'


def write_svg(svg: str, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg)
    logger.info("Wrote %s", path)


def svg_to_png(svg: str, path: Path, width: int = 1024) -> None:
    """
    Rasterize an SVG document.

    Raises:
        DataError: If cairosvg is not installed
    """
    if not HAS_CAIROSVG:
        raise DataError("cairosvg is required for PNG output. Install it with: pip install cairosvg")
    png = cairosvg.svg2png(bytestring=svg.encode('utf-8'), output_width=width)
    Path(path).write_bytes(png)
    logger.info("Wrote %s", path)
