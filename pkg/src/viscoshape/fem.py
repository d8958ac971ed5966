"""Piecewise-affine finite elements on a uniform triangulation of the unit square.

Node ``(i, j)`` sits at ``(i h, j h)`` and has flat index ``j * (n + 1) + i``,
so ``values.reshape(n + 1, n + 1)`` is indexed ``[j, i]`` like an image.
Each grid cell is split along its lower-left to upper-right diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

MAX_LEVEL = 12


class DomainError(ValueError):
    pass


class MaskError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    level: int
    n: int
    h: float
    coords: np.ndarray     # (N, 2)
    tris: np.ndarray       # (T, 3), counter-clockwise
    grads: np.ndarray      # (T, 3, 2) gradients of the local basis functions
    area: float            # area of every triangle

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def num_tris(self) -> int:
        return self.tris.shape[0]

    @property
    def shape(self):
        return (self.n + 1, self.n + 1)

    def grid(self, values: np.ndarray) -> np.ndarray:
        """View nodal values as an image indexed ``[j, i]``."""
        return np.asarray(values).reshape(self.shape + np.shape(values)[1:])


@lru_cache(maxsize=None)
def make_mesh(level: int) -> Mesh:
    if not (isinstance(level, (int, np.integer)) and 1 <= level <= MAX_LEVEL):
        raise DomainError(f"mesh level must be an integer in [1, {MAX_LEVEL}], got {level!r}")
    level = int(level)
    n = 2 ** level
    h = 1.0 / n
    jj, ii = np.mgrid[0:n + 1, 0:n + 1]
    coords = np.stack([ii.ravel() * h, jj.ravel() * h], axis=1)

    cj, ci = np.mgrid[0:n, 0:n]
    v00 = (cj * (n + 1) + ci).ravel()
    v10 = v00 + 1
    v01 = v00 + (n + 1)
    v11 = v01 + 1
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    tris = np.stack([lower, upper], axis=1).reshape(-1, 3)

    p = coords[tris]
    E = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns are edges
    Einv = np.linalg.inv(E)
    # grad b1, grad b2 are the rows of E^-1; grad b0 = -(sum)
    g12 = Einv
    grads = np.concatenate([-(g12[:, 0:1] + g12[:, 1:2]), g12], axis=1)
    for arr in (coords, tris, grads):
        arr.setflags(write=False)
    return Mesh(level=level, n=n, h=h, coords=coords, tris=tris, grads=grads, area=0.5 * h * h)


def nodal_interpolant(mesh: Mesh, func) -> np.ndarray:
    """Nodal values of ``func(x, y)``."""
    return np.asarray(func(mesh.coords[:, 0], mesh.coords[:, 1]), dtype=float)


# ---------------------------------------------------------------------------
# fields

@dataclass(frozen=True, eq=False)
class ScalarField:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        if np.shape(self.values) != (self.mesh.num_nodes,):
            raise ValueError("scalar field length does not match the mesh")

    def eval(self, x):
        return eval_field(self.mesh, self.values, x)


@dataclass(frozen=True, eq=False)
class ShapeMask(ScalarField):
    """Approximate characteristic function with nodal values in [0, 1]."""

    source: Optional[str] = None

    def __post_init__(self):
        super().__post_init__()
        v = self.values
        if np.any(v < -1e-12) or np.any(v > 1 + 1e-12):
            raise MaskError("mask values must lie in [0, 1]")

    def binary(self) -> np.ndarray:
        return self.values >= 0.5

    def area(self) -> float:
        return float(np.count_nonzero(self.binary())) * self.mesh.h ** 2


@dataclass(frozen=True, eq=False)
class VectorField2:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        if np.shape(self.values) != (self.mesh.num_nodes, 2):
            raise ValueError("vector field shape does not match the mesh")

    def eval(self, x):
        return eval_field(self.mesh, self.values, x)


@dataclass(frozen=True, eq=False)
class Deformation(VectorField2):
    """phi = id + u with the displacement u stored nodally."""

    @classmethod
    def identity(cls, mesh: Mesh) -> "Deformation":
        return cls(mesh, np.zeros((mesh.num_nodes, 2)))

    @classmethod
    def from_positions(cls, mesh: Mesh, positions: np.ndarray) -> "Deformation":
        return cls(mesh, np.asarray(positions, dtype=float) - mesh.coords)

    @property
    def positions(self) -> np.ndarray:
        return self.mesh.coords + self.values

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return x + eval_field(self.mesh, self.values, x)


# ---------------------------------------------------------------------------
# point location and evaluation on the undeformed grid

def locate(mesh: Mesh, x, clamp: bool = False):
    """Containing triangle and barycentric coordinates of points in D.

    Points on shared edges are assigned deterministically (floor rule).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if clamp:
        x = np.clip(x, 0.0, 1.0)
    elif np.any(x < -1e-12) or np.any(x > 1 + 1e-12) or not np.all(np.isfinite(x)):
        raise DomainError("point outside the computational domain")
    n = mesh.n
    s = np.clip(x, 0.0, 1.0) * n
    i = np.minimum(np.floor(s[:, 0]).astype(np.int64), n - 1)
    j = np.minimum(np.floor(s[:, 1]).astype(np.int64), n - 1)
    xi = s[:, 0] - i
    eta = s[:, 1] - j
    low = xi >= eta
    tri = 2 * (j * n + i) + np.where(low, 0, 1)
    bary = np.where(low[:, None],
                    np.stack([1 - xi, xi - eta, eta], axis=1),
                    np.stack([1 - eta, xi, eta - xi], axis=1))
    return tri, bary


def eval_field(mesh: Mesh, values: np.ndarray, x):
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 1
    tri, bary = locate(mesh, x_arr)
    vals = np.asarray(values)[mesh.tris[tri]]           # (m, 3) or (m, 3, c)
    out = np.einsum("mk,mk...->m...", bary, vals)
    return out[0] if single else out


def element_gradients(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Per-triangle constant gradient of a nodal field.

    Vector fields give ``(T, 2, 2)`` Jacobians ``d f_a / d x_b``.
    """
    vals = np.asarray(values)[mesh.tris]                  # (T, 3) or (T, 3, 2)
    if vals.ndim == 2:
        return np.einsum("tk,tkb->tb", vals, mesh.grads)
    return np.einsum("tka,tkb->tab", vals, mesh.grads)


def element_gradient(f: VectorField2, t: int) -> np.ndarray:
    mesh = f.mesh
    vals = f.values[mesh.tris[t]]
    jac = np.einsum("ka,kb->ab", vals, mesh.grads[t])
    if isinstance(f, Deformation):
        jac = jac + np.eye(2)
    return jac


def deformation_gradients(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    return element_gradients(mesh, u) + np.eye(2)


# ---------------------------------------------------------------------------
# quadrature: vertices, edge midpoints and centroid (exact for cubics)

QUAD_BARY = np.array([
    [1, 0, 0], [0, 1, 0], [0, 0, 1],
    [0.5, 0.5, 0], [0, 0.5, 0.5], [0.5, 0, 0.5],
    [1 / 3, 1 / 3, 1 / 3],
])
QUAD_WEIGHTS = np.array([1 / 20] * 3 + [2 / 15] * 3 + [9 / 20])


def quadrature_points(mesh: Mesh, t: int):
    verts = mesh.coords[mesh.tris[t]]
    pts = QUAD_BARY @ verts
    return [(pts[q], QUAD_WEIGHTS[q] * mesh.area) for q in range(len(QUAD_WEIGHTS))]


def all_quadrature_points(mesh: Mesh):
    """All quadrature points as arrays ``(T, 7, 2)`` and weights ``(7,)``."""
    verts = mesh.coords[mesh.tris]
    return np.einsum("qk,tkd->tqd", QUAD_BARY, verts), QUAD_WEIGHTS * mesh.area


def quadrature_values(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Nodal field interpolated to all quadrature points, ``(T, 7)``."""
    return np.einsum("qk,tk->tq", QUAD_BARY, np.asarray(values)[mesh.tris])


# ---------------------------------------------------------------------------
# pullbacks

def pullback_eval(f, phi: Deformation, x):
    """``f(P(phi(x)))`` with P the closest-point projection onto D."""
    y = np.clip(phi(x), 0.0, 1.0)
    if isinstance(f, (ScalarField, VectorField2)):
        return eval_field(f.mesh, f.values, y)
    mesh, values = f
    return eval_field(mesh, values, y)


def eval_extended(mesh: Mesh, values: np.ndarray, x) -> np.ndarray:
    """Evaluate a nodal field, continuing it affinely outside D.

    Outside the square the value at the closest boundary point is extended
    with the gradient of the element containing that point; for maps this
    keeps compositions orientation preserving where a clamp would collapse
    them onto the boundary.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xc = np.clip(x, 0.0, 1.0)
    tri, bary = locate(mesh, xc)
    vals = np.asarray(values)
    out = np.einsum("mk,mk...->m...", bary, vals[mesh.tris[tri]])
    off = x - xc
    outside = np.any(off != 0.0, axis=1)
    if np.any(outside):
        t = tri[outside]
        grads = mesh.grads[t]                                # (m, 3, 2)
        v = vals[mesh.tris[t]]
        if v.ndim == 2:
            out[outside] += np.einsum("mk,mkb,mb->m", v, grads, off[outside])
        else:
            out[outside] += np.einsum("mka,mkb,mb->ma", v, grads, off[outside])
    return out


def compose(mesh: Mesh, outer_positions: np.ndarray, inner_positions: np.ndarray) -> np.ndarray:
    """Nodal positions of ``outer o inner``; ``outer`` is continued affinely outside D."""
    return eval_extended(mesh, outer_positions, inner_positions)


# ---------------------------------------------------------------------------
# smoothing and prolongation

def gaussian_smooth(m: ScalarField, delta2: float) -> ScalarField:
    """Separable Gaussian filter of width ``delta2`` with reflecting boundary."""
    if not delta2 > 0:
        raise ValueError("delta2 must be positive")
    mesh = m.mesh
    sigma = delta2 / mesh.h
    out = ndimage.gaussian_filter(mesh.grid(m.values).astype(float), sigma=sigma,
                                  mode="reflect", truncate=3.0)
    return ScalarField(mesh, np.clip(out.ravel(), 0.0, 1.0) if _in_unit(m.values) else out.ravel())


def _in_unit(v) -> bool:
    return bool(np.all(v >= 0) and np.all(v <= 1))


def prolongate_values(level: int, values: np.ndarray) -> np.ndarray:
    """Nodal interpolation from ``level`` onto ``level + 1``."""
    if level >= MAX_LEVEL:
        raise DomainError("cannot refine beyond the maximal level")
    n = 2 ** level
    v = np.asarray(values, dtype=float)
    tail = v.shape[1:]
    g = v.reshape((n + 1, n + 1) + tail)
    f = np.zeros((2 * n + 1, 2 * n + 1) + tail)
    f[::2, ::2] = g
    f[::2, 1::2] = 0.5 * (g[:, :-1] + g[:, 1:])
    f[1::2, ::2] = 0.5 * (g[:-1, :] + g[1:, :])
    # cell centres lie on the lower-left/upper-right diagonal
    f[1::2, 1::2] = 0.5 * (g[:-1, :-1] + g[1:, 1:])
    return f.reshape((-1,) + tail)


def prolongate(f):
    mesh = f.mesh
    fine = make_mesh(mesh.level + 1)
    vals = prolongate_values(mesh.level, f.values)
    if isinstance(f, ShapeMask):
        return ShapeMask(fine, np.clip(vals, 0.0, 1.0), f.source)
    return type(f)(fine, vals)


def restrict_values(level: int, values: np.ndarray, target_level: int) -> np.ndarray:
    """Injection onto a coarser nested grid."""
    step = 2 ** (level - target_level)
    n = 2 ** level
    v = np.asarray(values)
    g = v.reshape((n + 1, n + 1) + v.shape[1:])
    return g[::step, ::step].reshape((-1,) + v.shape[1:])


# ---------------------------------------------------------------------------
# masks and rasters

def rasterize_mask(image: np.ndarray, level: Optional[int] = None, source: Optional[str] = None,
                   allow_empty: bool = False) -> ShapeMask:
    """Binary nodal mask from an 8-bit raster (threshold 128).

    Rows of the raster are the y index.  Rasters of size ``2^L + 1`` map one
    pixel per node; other sizes are resampled bilinearly onto the requested
    level before thresholding.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise MaskError("mask raster must be two-dimensional")
    H, W = img.shape
    if level is None:
        if H != W or (H - 1) & (H - 2) != 0 or H < 3:
            raise MaskError(f"cannot infer a mesh level from raster size {img.shape}")
        level = int(round(np.log2(H - 1)))
    mesh = make_mesh(level)
    n = mesh.n
    if (H - 1) % n == 0 and (W - 1) % n == 0:
        sy, sx = (H - 1) // n, (W - 1) // n
        sampled = img[::sy, ::sx].astype(float)
    else:
        jj, ii = np.mgrid[0:n + 1, 0:n + 1]
        rows = jj * (H - 1) / n
        cols = ii * (W - 1) / n
        sampled = ndimage.map_coordinates(img.astype(float), [rows, cols], order=1, mode="nearest")
    vals = (sampled >= 128).astype(float).ravel()
    if not allow_empty and not vals.any():
        raise MaskError("mask has zero area")
    return ShapeMask(mesh, vals, source)


def mask_to_image(m: ScalarField) -> np.ndarray:
    return np.clip(np.rint(m.mesh.grid(m.values) * 255.0), 0, 255).astype(np.uint8)


def mask_at_level(m: ShapeMask, level: int) -> ShapeMask:
    """Re-express a mask on another level (injection or interpolation)."""
    if level == m.mesh.level:
        return m
    if level < m.mesh.level:
        return ShapeMask(make_mesh(level), restrict_values(m.mesh.level, m.values, level), m.source)
    out = m
    while out.mesh.level < level:
        out = prolongate(out)
    return out


# ---------------------------------------------------------------------------
# point location in a deformed triangulation

def locate_deformed(mesh: Mesh, positions: np.ndarray, points: np.ndarray, tol: float = 1e-10):
    """Find, for each point, a triangle of the deformed mesh containing it.

    Returns ``(tri, bary)`` with ``tri = -1`` where no deformed triangle
    contains the point.  Among several hits the most interior one wins.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m = pts.shape[0]
    P = np.asarray(positions, dtype=float)
    tv = P[mesh.tris]                                     # (T, 3, 2)

    # bucket the query points on a uniform grid covering everything
    lo = np.minimum(pts.min(axis=0), tv.reshape(-1, 2).min(axis=0)) - 1e-9
    hi = np.maximum(pts.max(axis=0), tv.reshape(-1, 2).max(axis=0)) + 1e-9
    cell = mesh.h
    nb = np.maximum(np.ceil((hi - lo) / cell).astype(np.int64), 1)
    pb = np.minimum(((pts - lo) / cell).astype(np.int64), nb - 1)
    pkey = pb[:, 1] * nb[0] + pb[:, 0]
    order = np.argsort(pkey, kind="stable")
    sorted_keys = pkey[order]
    nbuckets = int(nb[0] * nb[1])
    starts = np.searchsorted(sorted_keys, np.arange(nbuckets), side="left")
    ends = np.searchsorted(sorted_keys, np.arange(nbuckets), side="right")

    tmin = np.minimum(((tv.min(axis=1) - lo) / cell).astype(np.int64), nb - 1)
    tmax = np.minimum(((tv.max(axis=1) - lo) / cell).astype(np.int64), nb - 1)
    span = tmax - tmin + 1
    tri_ids, bucket_ids = [], []
    for dy in range(int(span[:, 1].max())):
        for dx in range(int(span[:, 0].max())):
            ok = (dx < span[:, 0]) & (dy < span[:, 1])
            t = np.nonzero(ok)[0]
            tri_ids.append(t)
            bucket_ids.append((tmin[t, 1] + dy) * nb[0] + tmin[t, 0] + dx)
    tri_ids = np.concatenate(tri_ids)
    bucket_ids = np.concatenate(bucket_ids)
    counts = ends[bucket_ids] - starts[bucket_ids]
    keep = counts > 0
    tri_ids, bucket_ids, counts = tri_ids[keep], bucket_ids[keep], counts[keep]

    cand_tri = np.repeat(tri_ids, counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    cand_pt = order[np.repeat(starts[bucket_ids], counts) + offs]

    a = tv[cand_tri, 0]
    e1 = tv[cand_tri, 1] - a
    e2 = tv[cand_tri, 2] - a
    r = pts[cand_pt] - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    good = det > 0
    det_s = np.where(good, det, 1.0)
    b1 = (r[:, 0] * e2[:, 1] - r[:, 1] * e2[:, 0]) / det_s
    b2 = (e1[:, 0] * r[:, 1] - e1[:, 1] * r[:, 0]) / det_s
    b0 = 1.0 - b1 - b2
    score = np.minimum(np.minimum(b0, b1), b2)
    hit = good & (score >= -tol)

    tri = np.full(m, -1, dtype=np.int64)
    bary = np.zeros((m, 3))
    if np.any(hit):
        hp, ht, hs = cand_pt[hit], cand_tri[hit], score[hit]
        hb = np.stack([b0[hit], b1[hit], b2[hit]], axis=1)
        srt = np.lexsort((hs, hp))
        last = np.r_[hp[srt][1:] != hp[srt][:-1], True]
        sel = srt[last]
        tri[hp[sel]] = ht[sel]
        bary[hp[sel]] = hb[sel]
    return tri, bary


def pushforward_values(mesh: Mesh, positions: np.ndarray, values: np.ndarray,
                       points: Optional[np.ndarray] = None, fill=0.0) -> np.ndarray:
    """Values of ``f o phi^-1`` at ``points`` (default: the mesh nodes)."""
    pts = mesh.coords if points is None else points
    tri, bary = locate_deformed(mesh, positions, pts)
    vals = np.asarray(values)
    out = np.full((pts.shape[0],) + vals.shape[1:], fill, dtype=float)
    found = tri >= 0
    out[found] = np.einsum("mk,mk...->m...", bary[found], vals[mesh.tris[tri[found]]])
    return out


def inverse_positions(mesh: Mesh, positions: np.ndarray, points: Optional[np.ndarray] = None) -> np.ndarray:
    """``phi^-1`` at the given points; points outside phi(D) are extrapolated by MLS."""
    pts = mesh.coords if points is None else points
    tri, bary = locate_deformed(mesh, positions, pts)
    out = np.empty((pts.shape[0], 2))
    found = tri >= 0
    out[found] = np.einsum("mk,mkd->md", bary[found], mesh.coords[mesh.tris[tri[found]]])
    if not np.all(found):
        out[~found] = mls_resample(positions, mesh.coords, pts[~found], k=40)
    return out


def mls_resample(points: np.ndarray, values: np.ndarray, queries: np.ndarray, k: int = 12) -> np.ndarray:
    """Moving least squares with a local linear basis over the k nearest samples.

    Reproduces affine data exactly.
    """
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    k = min(k, points.shape[0])
    tree = cKDTree(points)
    dist, idx = tree.query(queries, k=k)
    if k == 1:
        return values[idx]
    radius = 1.5 * dist[:, -1:] + 1e-300
    w = (1.0 - (dist / radius) ** 2) ** 2
    d = points[idx] - queries[:, None, :]
    basis = np.concatenate([np.ones(d.shape[:2] + (1,)), d], axis=2)  # (m, k, 3)
    M = np.einsum("mk,mki,mkj->mij", w, basis, basis)
    scale = np.einsum("mii->m", M)[:, None, None]
    M = M + 1e-12 * scale * np.eye(3)
    rhs = np.einsum("mk,mki,mk...->mi...", w, basis, values[idx])
    coef = np.linalg.solve(M, rhs.reshape(M.shape[0], 3, -1))
    return coef[:, 0].reshape((queries.shape[0],) + values.shape[1:])
