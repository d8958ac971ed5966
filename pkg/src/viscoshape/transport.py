"""Discrete parallel transport by Schild's ladder.

The ladder only needs four operations on a space of points and tangent
vectors, collected in :class:`LadderSpace`:

    exp1(x, v)      point reached by the single step v from x
    log1(x, y)      the step from x to y
    midpoint(x, y)  middle point of the order-2 geodesic from x to y
    exp2(x, m)      end point z of the order-2 geodesic (x, m, z)

One rung transports ``v`` from ``x_prev`` to ``x_next``:
``p = exp1(x_prev, v)``, ``c = midpoint(p, x_next)``, ``q = exp2(x_prev, c)``
and ``v_next = log1(x_next, q)``.  Along a path the point ``q`` is carried
to the next rung directly, since ``exp1(x_next, log1(x_next, q)) = q``.

For shapes the points are maps ``Phi`` from one reference mask ``chi`` onto
the shapes and the vectors are Lagrangian displacements over ``chi``.  The
single-step logarithm between two points of the ladder is read off the
correspondence carried by the frame (``Phi_b - Phi_a``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Sequence

import numpy as np

from .energy import MaterialParams
from .fem import ShapeMask, compose, eval_extended, inverse_positions, mask_at_level
from .geodesic import DiscretePath, PathProblem, SolverConfig, minimize_path, rigid_fit, rotate_about, solve_stage
from .logexp import (ExpConfig, FoldingError, ShapeVariation, StepTooLargeError, VariationFrame,
                     _shape_dets, exp2_positions, exp_1, rasterize_image, resample)
from .solvers import SolverError

log = logging.getLogger(__name__)


class LadderSpace:
    """Interface of a space on which Schild's ladder runs."""

    def exp1(self, x, v):
        raise NotImplementedError

    def log1(self, x, y):
        raise NotImplementedError

    def midpoint(self, x, y):
        raise NotImplementedError

    def _middle_gradient(self, u0, mid, u2) -> float:
        mesh = self.mesh
        path = DiscretePath(mesh, [self.ref] * 3, [None, None], [u0, mid - mesh.coords, u2])
        u = np.concatenate([v.ravel() for v in path.u])
        g, _ = PathProblem(path, None, None, self.p, 0.0).gradient_hessian(u)
        n = 2 * mesh.num_nodes
        return float(np.linalg.norm(g[n:2 * n]))

    def exp2(self, x, m):
        raise NotImplementedError


@dataclass
class Rung:
    """Vertices of one geodesic parallelogram."""

    p: Any
    cross: Any
    p_next: Any


def schild_step(space: LadderSpace, x_prev, x_next, v_prev):
    """Transport ``v_prev`` from ``x_prev`` to ``x_next``; returns ``(v_next, rung)``."""
    p = space.exp1(x_prev, v_prev)
    cross = space.midpoint(p, x_next)
    q = space.exp2(x_prev, cross)
    return space.log1(x_next, q), Rung(p, cross, q)


def ladder_transport(space: LadderSpace, points: Sequence, v0, refine: int = 0):
    """Transport ``v0`` from ``points[0]`` to ``points[-1]``; returns ``(v, rungs)``.

    When a rung raises :class:`StepTooLargeError` the edge is split at its
    geodesic midpoint (at most ``refine`` times per edge).
    """
    rungs: List[Rung] = []
    p = space.exp1(points[0], v0)

    def hop(x_prev, x_next, p, depth):
        try:
            cross = space.midpoint(p, x_next)
            q = space.exp2(x_prev, cross)
        except StepTooLargeError:
            if depth >= refine:
                raise
            mid = space.midpoint(x_prev, x_next)
            return hop(mid, x_next, hop(x_prev, mid, p, depth + 1), depth + 1)
        rungs.append(Rung(p, cross, q))
        return q

    for k in range(len(points) - 1):
        try:
            p = hop(points[k], points[k + 1], p, 0)
        except SolverError as exc:
            raise type(exc)(f"transport step {k + 1}: {exc}", iterate=exc.iterate,
                            history=exc.history) from None
    return space.log1(points[-1], p), rungs


def ladder_connection(space: LadderSpace, x, xi, eta: Callable, tau: float):
    """Time-discrete covariant derivative of the vector field ``eta`` along ``xi``:
    ``(P_{x <- x_tau} eta(x_tau) - eta(x)) / tau`` with ``x_tau = exp1(x, tau xi)``."""
    x_tau = space.exp1(x, tau * xi)
    w, _ = ladder_transport(space, [x_tau, x], eta(x_tau))
    return (w - eta(x)) / tau


# ---------------------------------------------------------------------------
# shapes

class ShapeLadder(LadderSpace):
    """Points are nodal positions of maps over the reference mask ``ref``;
    vectors are nodal displacements over the same reference."""

    def __init__(self, ref: ShapeMask, p: MaterialParams = MaterialParams(),
                 cfg: SolverConfig = SolverConfig(tol=1e-7, abs_tol=1e-12),
                 exp_cfg: ExpConfig = ExpConfig()):
        self.ref = ref
        self.mesh = ref.mesh
        self.p = p
        self.cfg = cfg
        self.exp_cfg = exp_cfg
        on = ref.values >= 0.5
        self.w = on.astype(float) if on.any() else np.ones(self.mesh.num_nodes)

    def _place(self, x, y, s: float, z):
        """Move ``y`` rigidly so that its rigid part relative to ``x`` is ``s``
        times that of ``z``.  Shapes are only determined up to rigid motions;
        this keeps the rigid parts of ladder points on a straight line."""
        theta_z, cx, cz = rigid_fit(x, z, self.w)
        theta_y, _, cy = rigid_fit(x, y, self.w)
        return rotate_about(y, s * theta_z - theta_y, cy, cx + s * (cz - cx))

    def exp1(self, x, v):
        y = x + v
        if not np.all(_shape_dets(self.ref, y) > 0):
            raise FoldingError("transported variation folds the shape")
        return y

    def log1(self, x, y):
        return y - x

    def midpoint(self, x, y):
        mesh = self.mesh
        if np.array_equal(x, y):
            return x.copy()
        u = [x - mesh.coords, 0.5 * (x + y) - mesh.coords, y - mesh.coords]
        path = DiscretePath(mesh, [self.ref] * 3, [None, None], u)
        # tolerance relative to the gradient with the middle point at x (the
        # average of x and y may already be nearly stationary), and at least
        # to that of a dilation by one mesh width (x and y may nearly agree)
        c = self.w @ x / self.w.sum()
        scale = max(self._middle_gradient(u[0], x, u[2]),
                    self._middle_gradient(u[0], x + mesh.h * (x - c), u[2]))
        path, ok, gnorm, _ = solve_stage(path, None, None, self.cfg, self.p, [], free=[1],
                                         reg_weight=0.0, allow_reset=False, gnorm_ref=scale)
        if not ok:
            raise SolverError(f"midpoint solve did not converge (|g| = {gnorm:.3e})")
        return self._place(x, path.positions(1), 0.5, y)

    def exp2(self, x, m):
        return self._place(x, exp2_positions(self.ref, x, m, self.exp_cfg, self.p), 2.0, m)

    def shape(self, x) -> ShapeMask:
        return rasterize_image(self.ref, x)


@dataclass
class TransportJob:
    """A path of masks ``O_0 .. O_K`` and a variation at ``O_0``.

    ``maps`` optionally gives the positions of maps from the reference
    ``ref`` onto every ``O_k`` (for instance the composed maps of a
    computed geodesic); otherwise they are built from single-step matchings.
    ``rungs`` receives the parallelogram vertices of every step.
    """

    path: List[ShapeMask]
    variation: ShapeVariation
    ref: Optional[ShapeMask] = None
    maps: Optional[List[np.ndarray]] = None
    rungs: List[Rung] = field(default_factory=list)

    def __post_init__(self):
        if len(self.path) < 2:
            raise ValueError("a transport path needs at least two shapes")
        base = mask_at_level(self.variation.base, self.path[0].mesh.level)
        if np.count_nonzero(base.binary() != self.path[0].binary()) > 0:
            raise ValueError("the variation's base shape must equal O_0")

    @classmethod
    def from_geodesic(cls, path: DiscretePath, variation: ShapeVariation) -> "TransportJob":
        return cls(path.shapes(), variation, path.refs[0], path.composed_maps())


def matching_maps(shapes: Sequence[ShapeMask], cfg: SolverConfig = SolverConfig(),
                  p: MaterialParams = MaterialParams()) -> List[np.ndarray]:
    """Maps from ``O_0`` onto every ``O_k``, composed from single-step matchings."""
    mesh = shapes[0].mesh
    maps = [mesh.coords.copy()]
    one = cfg.for_K(1)
    for k in range(1, len(shapes)):
        a, b = shapes[k - 1], shapes[k]
        if np.array_equal(a.binary(), b.binary()):
            maps.append(maps[-1].copy())
            continue
        res = minimize_path(a, b, one, p)
        # psi_k = phi_1 o phi_0^-1 on the current points
        y = inverse_positions(mesh, res.path.positions(0), maps[-1])
        maps.append(compose(mesh, res.path.positions(1), y))
    return maps


def _job_frame(job: TransportJob, cfg: SolverConfig, p: MaterialParams):
    ref = job.ref if job.ref is not None else job.path[0]
    maps = job.maps if job.maps is not None else matching_maps(job.path, cfg, p)
    return ref, maps


def _lagrangian(variation: ShapeVariation, phi0: np.ndarray) -> np.ndarray:
    fr = variation.frame
    if fr is not None and fr.psi is None and np.allclose(fr.phi0, phi0, atol=1e-12):
        return fr.lagrangian()
    return eval_extended(variation.mesh, variation.zeta, phi0)


def _to_variation(base: ShapeMask, ref: ShapeMask, phi: np.ndarray, V: np.ndarray) -> ShapeVariation:
    mesh = ref.mesh
    return ShapeVariation(base, resample(phi, V, mesh), VariationFrame(ref, phi, phi + V))


def transport_path(job: TransportJob, cfg: SolverConfig = SolverConfig(),
                   p: MaterialParams = MaterialParams(), exp_cfg: ExpConfig = ExpConfig(),
                   refine: int = 2) -> ShapeVariation:
    """Transport ``job.variation`` along ``job.path`` to a variation at ``O_K``."""
    ref, maps = _job_frame(job, cfg, p)
    space = ShapeLadder(ref, p, SolverConfig(tol=1e-7, abs_tol=1e-12, max_iter=cfg.max_iter), exp_cfg)
    V0 = _lagrangian(job.variation, maps[0])
    V, rungs = ladder_transport(space, maps, V0, refine=refine)
    job.rungs[:] = rungs
    return _to_variation(job.path[-1], ref, maps[-1], V)


def transport_step(O_prev: ShapeMask, O_next: ShapeMask, zeta_prev: ShapeVariation,
                   cfg: SolverConfig = SolverConfig(), p: MaterialParams = MaterialParams(),
                   exp_cfg: ExpConfig = ExpConfig()) -> ShapeVariation:
    """One rung of the ladder: the variation at ``O_next`` parallel to ``zeta_prev``."""
    return transport_path(TransportJob([O_prev, O_next], zeta_prev), cfg, p, exp_cfg)


def discrete_connection(xi: ShapeVariation, eta: Callable[[ShapeMask], ShapeVariation], tau: float,
                        cfg: SolverConfig = SolverConfig(), p: MaterialParams = MaterialParams(),
                        exp_cfg: ExpConfig = ExpConfig()) -> ShapeVariation:
    """``(P_{O <- O_tau} eta(O_tau) - eta(O)) / tau`` with ``O_tau = Exp1_O(tau xi)``.

    Both variations are compared as nodal fields at the base points of ``O``.
    """
    O = xi.base
    O_tau = exp_1(xi.scaled(tau))
    moved = transport_step(O_tau, O, eta(O_tau), cfg, p, exp_cfg)
    here = eta(O)
    return ShapeVariation(O, (moved.zeta - here.zeta) / tau)
