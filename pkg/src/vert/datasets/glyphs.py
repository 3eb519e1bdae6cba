"""Procedural glyph shapes, rasterised at any size.

Each glyph is a list of line segments in the unit square; a pixel is "on"
when its centre lies within ``width`` (in unit-square coordinates) of a
segment.
"""
from __future__ import annotations

import numpy as np

_GLYPHS: list[list[tuple[float, float, float, float]]] = [
    # 0: ring
    [(0.1, 0.1, 0.9, 0.1), (0.9, 0.1, 0.9, 0.9), (0.9, 0.9, 0.1, 0.9), (0.1, 0.9, 0.1, 0.1)],
    # 1: cross
    [(0.1, 0.1, 0.9, 0.9), (0.9, 0.1, 0.1, 0.9)],
    # 2: plus
    [(0.5, 0.05, 0.5, 0.95), (0.05, 0.5, 0.95, 0.5)],
    # 3: three bars
    [(0.1, 0.1, 0.9, 0.1), (0.1, 0.5, 0.9, 0.5), (0.1, 0.9, 0.9, 0.9)],
    # 4: H
    [(0.1, 0.1, 0.1, 0.9), (0.9, 0.1, 0.9, 0.9), (0.1, 0.5, 0.9, 0.5)],
    # 5: triangle
    [(0.5, 0.1, 0.1, 0.9), (0.5, 0.1, 0.9, 0.9), (0.1, 0.9, 0.9, 0.9)],
    # 6: L + dot
    [(0.15, 0.1, 0.15, 0.9), (0.15, 0.9, 0.9, 0.9), (0.75, 0.2, 0.8, 0.3)],
    # 7: Z
    [(0.1, 0.1, 0.9, 0.1), (0.9, 0.1, 0.1, 0.9), (0.1, 0.9, 0.9, 0.9)],
    # 8: diamond
    [(0.5, 0.05, 0.95, 0.5), (0.95, 0.5, 0.5, 0.95), (0.5, 0.95, 0.05, 0.5), (0.05, 0.5, 0.5, 0.05)],
    # 9: T with foot
    [(0.1, 0.1, 0.9, 0.1), (0.5, 0.1, 0.5, 0.9), (0.3, 0.9, 0.7, 0.9)],
]

NUM_GLYPHS = len(_GLYPHS)


def _seg_dist(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def render(index: int, size: int, width: float | None = None) -> np.ndarray:
    """Binary (size, size) raster of glyph ``index``."""
    if width is None:
        width = max(0.6 / size, 0.09)
    c = (np.arange(size) + 0.5) / size
    py, px = np.meshgrid(c, c, indexing="ij")
    d = np.full((size, size), np.inf)
    for seg in _GLYPHS[index % NUM_GLYPHS]:
        d = np.minimum(d, _seg_dist(px, py, *seg))
    return (d <= width).astype(np.float64)
