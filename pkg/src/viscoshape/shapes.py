"""Analytic test shapes sampled at mesh nodes.

Shapes are unions of primitives given as predicates on ``(x, y)``; sampling
at node coordinates keeps masks nested across levels.
"""
from __future__ import annotations

from typing import Iterable, Tuple

import numpy as np

from .fem import ShapeMask, make_mesh


def _mask(level: int, inside, name: str) -> ShapeMask:
    mesh = make_mesh(level)
    x, y = mesh.coords[:, 0], mesh.coords[:, 1]
    return ShapeMask(mesh, inside(x, y).astype(float), source=name)


def disk(level: int, center=(0.5, 0.5), radius: float = 0.2) -> ShapeMask:
    cx, cy = center
    return _mask(level, lambda x, y: (x - cx) ** 2 + (y - cy) ** 2 <= radius ** 2 + 1e-12, "disk")


def ellipse(level: int, center=(0.5, 0.5), axes=(0.25, 0.15), angle: float = 0.0) -> ShapeMask:
    cx, cy = center
    a, b = axes
    c, s = np.cos(angle), np.sin(angle)

    def inside(x, y):
        dx, dy = x - cx, y - cy
        u, v = c * dx + s * dy, -s * dx + c * dy
        return (u / a) ** 2 + (v / b) ** 2 <= 1 + 1e-12

    return _mask(level, inside, "ellipse")


def annulus(level: int, center=(0.5, 0.5), r_in: float = 0.1, r_out: float = 0.25) -> ShapeMask:
    cx, cy = center

    def inside(x, y):
        d2 = (x - cx) ** 2 + (y - cy) ** 2
        return (d2 <= r_out ** 2 + 1e-12) & (d2 >= r_in ** 2 - 1e-12)

    return _mask(level, inside, "annulus")


Box = Tuple[float, float, float, float]


def boxes(level: int, rects: Iterable[Box], name: str = "boxes", slant: float = 0.0) -> ShapeMask:
    """Union of axis-aligned rectangles ``(x0, y0, x1, y1)``.

    ``slant`` shears the union horizontally about ``y = 0.5`` (italic letters).
    """
    rects = list(rects)

    def inside(x, y):
        x = x - slant * (y - 0.5)
        out = np.zeros_like(x, dtype=bool)
        for x0, y0, x1, y1 in rects:
            out |= (x >= x0 - 1e-12) & (x <= x1 + 1e-12) & (y >= y0 - 1e-12) & (y <= y1 + 1e-12)
        return out

    return _mask(level, inside, name)


# block letters in the unit square; strokes are 0.14 wide
LETTERS = {
    "I": [(0.43, 0.2, 0.57, 0.8)],
    "L": [(0.3, 0.2, 0.44, 0.8), (0.3, 0.2, 0.7, 0.34)],
    "T": [(0.43, 0.2, 0.57, 0.8), (0.25, 0.66, 0.75, 0.8)],
    "U": [(0.28, 0.2, 0.42, 0.78), (0.58, 0.2, 0.72, 0.78), (0.28, 0.2, 0.72, 0.34)],
    "C": [(0.28, 0.2, 0.42, 0.8), (0.28, 0.2, 0.72, 0.34), (0.28, 0.66, 0.72, 0.8)],
    "E": [(0.28, 0.2, 0.42, 0.8), (0.28, 0.2, 0.72, 0.34), (0.28, 0.66, 0.72, 0.8),
          (0.28, 0.44, 0.62, 0.56)],
}


def letter(level: int, char: str, slant: float = 0.0) -> ShapeMask:
    try:
        rects = LETTERS[char.upper()]
    except KeyError:
        raise ValueError(f"no block letter {char!r}; available: {sorted(LETTERS)}") from None
    return boxes(level, rects, name=f"letter-{char.upper()}", slant=slant)


def translated(m: ShapeMask, shift) -> ShapeMask:
    """Grid-exact translation by a whole number of cells (zero fill)."""
    mesh = m.mesh
    di, dj = (int(round(s / mesh.h)) for s in shift)
    g = mesh.grid(m.values)
    out = np.zeros_like(g)
    n1 = mesh.n + 1
    src = g[max(0, -dj):n1 - max(0, dj), max(0, -di):n1 - max(0, di)]
    out[max(0, dj):max(0, dj) + src.shape[0], max(0, di):max(0, di) + src.shape[1]] = src
    return ShapeMask(mesh, out.ravel(), m.source)


def rotated90(m: ShapeMask, times: int = 1) -> ShapeMask:
    """Grid-exact counter-clockwise rotation about the domain centre."""
    g = m.mesh.grid(m.values)
    return ShapeMask(m.mesh, np.rot90(g, k=times).ravel().copy(), m.source)
