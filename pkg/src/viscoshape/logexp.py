"""Discrete logarithm and exponential maps.

A shape variation is a displacement ``zeta`` of the material points of a
shape ``O``; ``id + zeta`` maps ``O`` onto a nearby shape.  Internally the
exponential works in a Lagrangian frame: a reference mask ``chi`` and maps
``Phi_0``, ``Phi_1`` with ``O = Phi_0(chi)`` and ``(id + zeta)(O) = Phi_1(chi)``.
For a variation given only by its Eulerian field the frame is
``chi = O``, ``Phi_0 = id``, ``Phi_1 = id + zeta``.

In that frame the pair energy of ``Phi_{j-1} -> Phi_j`` is an integral over
``chi``, and the discrete geodesic condition for the triple
``(Phi_0, Phi_1, Phi_2)`` reads

    d/dPhi_1 [ W[Phi_0, Phi_1] + W[Phi_1, Phi_2] ] = 0,

which is a square nonlinear system for ``Phi_2`` (the exponential step).
Its solutions form a family ``Q Phi_2 + b`` over rigid motions; Newton runs
with three pinned components and the result is rigidly aligned with the
initial guess.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from .energy import MaterialParams
from .fem import (Mesh, ShapeMask, compose, element_gradients, eval_extended, mask_at_level, mls_resample,
                  pushforward_values)
from .geodesic import (PairOperator, RegularizerOperator, SolverConfig, gauge_dofs, minimize_path, rigid_fit,
                       rotate_about)
from .solvers import SolverError, newton_bordered

log = logging.getLogger(__name__)


class FoldingError(ValueError):
    """A deformation is not orientation preserving on the shape."""


class StepTooLargeError(SolverError):
    """The exponential step is too large for the Newton solve; subdivide it."""


@dataclass
class VariationFrame:
    """Lagrangian description of a variation.

    ``O = Phi_0(ref)`` and ``(id + zeta)(O) = Phi_1(ref1)`` where
    ``ref1 = psihat(ref)`` for a reference matching ``psihat = id + psi``
    (``psi=None`` means ``ref1 = ref``).  The matching of ``O`` onto the
    next shape is ``Phi_1 o psihat o Phi_0^-1``; keeping ``psihat`` separate
    avoids re-interpolating composed piecewise-affine maps.
    """

    ref: ShapeMask
    phi0: np.ndarray
    phi1: np.ndarray
    psi: Optional[np.ndarray] = None
    ref1: Optional[ShapeMask] = None
    reg_weight: float = 0.0

    def __post_init__(self):
        if self.ref1 is None:
            self.ref1 = self.ref

    @property
    def mesh(self) -> Mesh:
        return self.ref.mesh

    def next_positions(self) -> np.ndarray:
        """``Phi_1 o psihat`` at the nodes."""
        if self.psi is None:
            return self.phi1
        return compose(self.mesh, self.phi1, self.mesh.coords + self.psi)

    def lagrangian(self) -> np.ndarray:
        return self.next_positions() - self.phi0

    def scaled(self, s: float) -> "VariationFrame":
        return VariationFrame(self.ref, self.phi0, self.phi0 + s * self.lagrangian(),
                              reg_weight=self.reg_weight)


@dataclass
class ShapeVariation:
    """Displacement ``zeta`` (nodal, ``(N, 2)``) of the material points of ``base``.

    Values away from the shape are an extension and carry no meaning.
    ``frame`` optionally keeps the Lagrangian description the variation
    came from, which the exponential uses instead of ``id + zeta``.
    """

    base: ShapeMask
    zeta: np.ndarray
    frame: Optional[VariationFrame] = None

    def __post_init__(self):
        self.zeta = np.asarray(self.zeta, dtype=float).reshape(-1, 2)
        if self.zeta.shape[0] != self.base.mesh.num_nodes:
            raise ValueError("variation does not match the mesh of its base shape")
        if not np.all(np.isfinite(self.zeta)):
            raise ValueError("variation has non-finite values")

    @property
    def mesh(self) -> Mesh:
        return self.base.mesh

    @classmethod
    def zero(cls, base: ShapeMask) -> "ShapeVariation":
        return cls(base, np.zeros((base.mesh.num_nodes, 2)))

    def lagrangian_frame(self) -> VariationFrame:
        if self.frame is not None:
            return self.frame
        x = self.mesh.coords
        return VariationFrame(self.base, x.copy(), x + self.zeta)

    def scaled(self, s: float) -> "ShapeVariation":
        fr = None if self.frame is None else self.frame.scaled(s)
        return ShapeVariation(self.base, s * self.zeta, fr)

    def sup_norm(self) -> float:
        on = self.base.values >= 0.5
        return float(np.abs(self.zeta[on]).max()) if np.any(on) else 0.0

    def is_orientation_preserving(self) -> bool:
        fr = self.lagrangian_frame()
        return bool(np.all(_shape_dets(fr.ref1, fr.phi1) > 0))


def _shape_dets(ref: ShapeMask, positions: np.ndarray) -> np.ndarray:
    mesh = ref.mesh
    touch = np.any(ref.values[mesh.tris] >= 0.5, axis=1)
    F = element_gradients(mesh, positions - mesh.coords)[touch] + np.eye(2)
    return np.linalg.det(F)


def resample(points: np.ndarray, values: np.ndarray, mesh: Mesh, k: int = 12) -> np.ndarray:
    """Scattered samples ``values`` at ``points`` onto the mesh nodes.

    Moving least squares with a linear basis (exact for affine data); when
    the samples sit on the nodes already they are returned unchanged.
    """
    if points.shape == mesh.coords.shape and np.allclose(points, mesh.coords, rtol=0, atol=1e-13):
        return np.array(values, dtype=float)
    return mls_resample(points, values, mesh.coords, k=k)


def rasterize_image(ref: ShapeMask, positions: np.ndarray) -> ShapeMask:
    """Mask of ``Phi(chi)``: nodes whose preimage lies inside the reference mask."""
    vals = pushforward_values(ref.mesh, positions, ref.values)
    return ShapeMask(ref.mesh, (vals >= 0.5).astype(float))


# ---------------------------------------------------------------------------
# logarithm

def log_K(O: ShapeMask, O_tilde: ShapeMask, K: int, cfg: SolverConfig = SolverConfig(),
          p: MaterialParams = MaterialParams()) -> ShapeVariation:
    """The first matching displacement of the discrete geodesic of order ``K``.

    ``K * zeta`` approximates the Riemannian logarithm.  Solver failures of
    the path minimization propagate as :class:`SolverError`.
    """
    if K < 1:
        raise ValueError("K must be positive")
    cfg = replace(cfg.for_K(K), polish_resets=0)
    result = minimize_path(O, O_tilde, cfg, p)
    return variation_from_path(result.path, O, p)


def variation_from_path(path, O: Optional[ShapeMask] = None,
                        p: MaterialParams = MaterialParams()) -> ShapeVariation:
    """Variation ``psi_1 - id`` at ``O_0`` from a (converged) discrete path.

    The frame keeps the path's own parameterization of the first step, so
    the exponential continues the path without re-interpolation.  For a
    path over a single reference the frame also carries the path's
    regularizer weight ``delta3 / K``; the exponential then solves the same
    stationarity condition as the path solver and retraces the path.
    """
    mesh = path.mesh
    base = path.shapes()[0] if O is None else mask_at_level(O, path.level)
    reg = p.delta3 / path.K if path.pristine else 0.0
    fr = VariationFrame(path.refs[0], path.positions(0), path.positions(1), path.psi[0], path.refs[1],
                        reg_weight=reg)
    zeta = resample(fr.phi0, fr.lagrangian(), mesh)
    return ShapeVariation(base, zeta, fr)


# ---------------------------------------------------------------------------
# exponential

@dataclass(frozen=True)
class ExpConfig:
    """Newton settings for the exponential step.

    ``tol`` is relative to the size of the force ``dW[Phi_0, Phi_1]``;
    ``guard`` is the step-size limit in mesh widths.
    """

    tol: float = 1e-9
    abs_tol: float = 1e-13
    max_iter: int = 40
    guard: float = 4.0


def exp_1(v: ShapeVariation) -> ShapeMask:
    """The shape ``(id + zeta)(O)``, rasterized by forward mapping."""
    fr = v.lagrangian_frame()
    if not np.all(_shape_dets(fr.ref1, fr.phi1) > 0):
        raise FoldingError("id + zeta folds on the shape")
    return rasterize_image(fr.ref1, fr.phi1)


def _rigid_align(y: np.ndarray, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``Q y + b`` with the rotation and shift minimizing ``sum w |Q y + b - x|^2``."""
    w = w / w.sum()
    cy, cx = w @ y, w @ x
    M = (x - cx).T @ ((y - cy) * w[:, None])
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, np.sign(np.linalg.det(U @ Vt))])
    Q = U @ D @ Vt
    return (y - cy) @ Q.T + cx


def exp2_positions(ref: ShapeMask, phi0: np.ndarray, phi1: np.ndarray,
                   cfg: ExpConfig = ExpConfig(), p: MaterialParams = MaterialParams(),
                   op: Optional[PairOperator] = None, prev_op: Optional[PairOperator] = None,
                   init: Optional[np.ndarray] = None, reg_weight: float = 0.0) -> np.ndarray:
    """Solve the geodesic condition of the triple ``(Phi_0, Phi_1, Phi_2)`` for ``Phi_2``.

    ``Phi_1`` and ``Phi_2`` live over ``ref``; ``prev_op`` is the pair
    operator of the incoming step (default: the pair over ``ref`` itself,
    i.e. ``Phi_0`` over ``ref`` too).  ``init`` defaults to ``2 Phi_1 - Phi_0``.
    ``reg_weight`` adds ``reg_weight * W_D[Phi_1]`` to the energy whose
    stationarity in ``Phi_1`` is imposed.
    """
    mesh = ref.mesh
    x = mesh.coords
    on = ref.values >= 0.5
    init = 2.0 * phi1 - phi0 if init is None else init
    step = float(np.abs(init - phi1)[on].max()) if np.any(on) else 0.0
    if step > cfg.guard * mesh.h:
        raise StepTooLargeError(f"step {step:.4g} exceeds {cfg.guard:g} mesh widths")
    op = PairOperator(mesh, ref.values, None, p) if op is None else op
    prev_op = op if prev_op is None else prev_op
    u0 = (phi0 - x).ravel()
    u1 = (phi1 - x).ravel()
    _, (_, force), _ = prev_op.derivatives(u0, u1)
    if reg_weight:
        force = force + RegularizerOperator(mesh, p, reg_weight).derivatives(u1)[1]
    tol = max(cfg.abs_tol, cfg.tol * float(np.linalg.norm(force)))

    def residual_jacobian(u2):
        try:
            _, (g_prev, _), (_, H_pn, _) = op.derivatives(u1, u2)
        except SolverError:
            return np.full(u2.shape, np.inf), None
        return force + g_prev, H_pn

    pins = gauge_dofs(mesh, ref.values)
    C = sp.csr_matrix((np.ones(3), (np.arange(3), pins)), shape=(3, 2 * mesh.num_nodes))
    u_init = (init - x).ravel()
    # the extrapolated guess may fold away from the shape: pull it towards Phi_1
    t = 1.0
    while not np.all(np.isfinite(residual_jacobian(u_init)[0])):
        t *= 0.5
        if t < 1e-3:
            raise StepTooLargeError("no admissible initial guess for the exponential step")
        u_init = (phi1 + t * (init - phi1) - x).ravel()
    try:
        u2, _ = newton_bordered(residual_jacobian, u_init, C, C @ u_init, tol, max_iter=cfg.max_iter)
    except SolverError as exc:
        raise StepTooLargeError(f"exponential step did not converge: {exc}", iterate=exc.iterate,
                                history=exc.history) from None
    phi2 = x + u2.reshape(-1, 2)
    w = np.where(on, 1.0, 0.0) if np.any(on) else np.ones(mesh.num_nodes)
    return _rigid_align(phi2, init, w)


def _first_step(v: ShapeVariation, p: MaterialParams):
    """Incoming pair operator and initial guess for the first exponential step."""
    fr = v.lagrangian_frame()
    if fr.psi is None:
        return None, None
    prev_op = PairOperator(fr.mesh, fr.ref.values, fr.psi, p)
    # repeat the incoming displacement: Phi_2 ~ Phi_1 + zeta o Phi_1
    init = fr.phi1 + eval_extended(fr.mesh, v.zeta, fr.phi1)
    return prev_op, init


class _Placement:
    """Continues the rigid part of the first step linearly: the best-fit
    rotation and centroid shift of ``Phi_j`` relative to ``Phi_0`` are ``j``
    times those of ``Phi_1``."""

    def __init__(self, fr: VariationFrame):
        self.fr = fr
        on = fr.ref.values >= 0.5
        self.w = on.astype(float) if on.any() else np.ones(fr.mesh.num_nodes)
        self.theta1, self.c0, self.c1 = rigid_fit(fr.phi0, fr.next_positions(), self.w)

    def __call__(self, phi: np.ndarray, j: int) -> np.ndarray:
        fr = self.fr
        pts = phi if fr.psi is None else compose(fr.mesh, phi, fr.mesh.coords + fr.psi)
        theta, _, c = rigid_fit(fr.phi0, pts, self.w)
        return rotate_about(phi, j * self.theta1 - theta, c, self.c0 + j * (self.c1 - self.c0))


def exp_2(v: ShapeVariation, cfg: ExpConfig = ExpConfig(), p: MaterialParams = MaterialParams()) -> ShapeMask:
    """Second shape ``O_2`` of the discrete geodesic starting with ``(O, (id + zeta)(O))``."""
    fr = v.lagrangian_frame()
    prev_op, init = _first_step(v, p)
    phi2 = exp2_positions(fr.ref1, fr.phi0, fr.phi1, cfg, p, prev_op=prev_op, init=init,
                          reg_weight=fr.reg_weight)
    phi2 = _Placement(fr)(phi2, 2)
    return rasterize_image(fr.ref1, phi2)


def exp_flow(v: ShapeVariation, k: int, cfg: ExpConfig = ExpConfig(),
             p: MaterialParams = MaterialParams()) -> List[np.ndarray]:
    """Maps ``Phi_0 .. Phi_k`` of the discrete geodesic flow.

    ``Phi_0`` lives over the frame's ``ref``, all later maps over ``ref1``.
    """
    if k < 1:
        raise ValueError("k must be positive")
    fr = v.lagrangian_frame()
    if not np.all(_shape_dets(fr.ref1, fr.phi1) > 0):
        raise FoldingError("id + zeta folds on the shape")
    op = PairOperator(fr.mesh, fr.ref1.values, None, p)
    prev_op, init = _first_step(v, p)
    place = _Placement(fr)
    maps = [fr.phi0, fr.phi1]
    for j in range(2, k + 1):
        try:
            phi = exp2_positions(fr.ref1, maps[-2], maps[-1], cfg, p, op=op,
                                 prev_op=prev_op if j == 2 else None,
                                 init=init if j == 2 else None, reg_weight=fr.reg_weight)
            maps.append(place(phi, j))
        except StepTooLargeError as exc:
            raise StepTooLargeError(f"exponential step {j}: {exc}", iterate=maps,
                                    history=exc.history) from None
    return maps


def exp_k(v: ShapeVariation, k: int, cfg: ExpConfig = ExpConfig(),
          p: MaterialParams = MaterialParams()) -> List[ShapeMask]:
    """Shapes ``O_1 .. O_k`` of the discrete geodesic flow."""
    fr = v.lagrangian_frame()
    return [rasterize_image(fr.ref1, m) for m in exp_flow(v, k, cfg, p)[1:]]


def exp_k_subdivided(v: ShapeVariation, k: int, cfg: ExpConfig = ExpConfig(),
                     p: MaterialParams = MaterialParams(), max_factor: int = 64) -> List[ShapeMask]:
    """``exp_k`` that replaces ``zeta`` by ``zeta / m`` and runs ``k m`` steps
    when a step is too large; returns every ``m``-th shape."""
    m = 1
    while True:
        try:
            shapes = exp_k(v.scaled(1.0 / m), k * m, cfg, p)
            return shapes[m - 1::m]
        except StepTooLargeError:
            if 2 * m > max_factor:
                raise
            m *= 2
            log.info("exponential step too large; subdividing by %d", m)


def two_geodesic_check(O: ShapeMask, O1: ShapeMask, O2: ShapeMask, cfg: SolverConfig = SolverConfig(),
                       p: MaterialParams = MaterialParams()) -> float:
    """Relative symmetric difference between ``O1`` and the re-minimized
    middle shape of the 2-path from ``O`` to ``O2``."""
    res = minimize_path(O, O2, cfg.for_K(2), p)
    mid = res.path.shapes()[1]
    ref = mask_at_level(O1, mid.mesh.level)
    return symmetric_difference(mid, ref) / max(ref.area(), 1e-300)


def symmetric_difference(a: ShapeMask, b: ShapeMask) -> float:
    """Area of the symmetric difference of two masks on the same mesh."""
    if a.mesh.level != b.mesh.level:
        raise ValueError("masks on different levels")
    d = ShapeMask(a.mesh, np.abs(a.binary().astype(float) - b.binary().astype(float)))
    return d.area()
