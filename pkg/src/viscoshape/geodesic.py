"""Discrete path energies and their minimization.

A discrete path ``(O_0, ..., O_K)`` is parameterized over reference shapes:
``O_k = phi_k(Ohat_k)`` where ``Ohat_k = psihat_k(Ohat_{k-1})`` are reference
objects with fixed reference matchings ``psihat_k``.  The matching of ``O_{k-1}``
onto ``O_k`` is then ``psi_k = phi_k o psihat_k o phi_{k-1}^-1`` and, after a
change of variables, each pair energy becomes an integral over the reference
domain:

    W_k = int chi_delta1(Ohat_{k-1}) W(grad(phi_k o psihat_k) grad(phi_{k-1})^-1)
          det grad(phi_{k-1}) dx

All unknowns are nodal displacements ``u_k = phi_k - id``.  Per-quadrature-point
deformation gradients are linear in the displacements, so each energy term
is assembled as ``D^T (block-diagonal 8x8) D`` with sparse operators ``D``
mapping displacements to gradient entries.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RectBivariateSpline

from .energy import INF, MaterialParams, pair_density
from .fem import (QUAD_BARY, QUAD_WEIGHTS, Deformation, compose, Mesh, ShapeMask, all_quadrature_points,
                  element_gradients, eval_field, gaussian_smooth, inverse_positions, locate,
                  make_mesh, mask_at_level, prolongate_values, pushforward_values,
                  quadrature_values, ScalarField)
from .solvers import SolverError, TRConfig, trust_region_newton

log = logging.getLogger(__name__)

_NUDGE = 1e-7


# ---------------------------------------------------------------------------
# sparse helpers

def _block_diag(blocks: np.ndarray) -> sp.csr_matrix:
    n, m, _ = blocks.shape
    return sp.bsr_matrix((blocks, np.arange(n), np.arange(n + 1)), shape=(n * m, n * m)).tocsr()


def _gradient_operator(mesh: Mesh, elems: np.ndarray, right: Optional[np.ndarray]) -> sp.csr_matrix:
    """Sparse map from a nodal displacement ``u`` (flattened ``2 n + a``) to
    the entries of ``grad(u)[elems] @ right`` stacked as ``4 g + 2 a + b``."""
    ng = elems.shape[0]
    gr = mesh.grads[elems]                                # (ng, 3, 2)
    if right is not None:
        gr = np.einsum("gic,gcb->gib", gr, right)
    nodes = mesh.tris[elems]                              # (ng, 3)
    g_idx, a_idx, b_idx, i_idx = np.meshgrid(np.arange(ng), np.arange(2), np.arange(2), np.arange(3),
                                             indexing="ij")
    rows = 4 * g_idx + 2 * a_idx + b_idx
    cols = 2 * nodes[g_idx, i_idx] + a_idx
    vals = gr[g_idx, i_idx, b_idx]
    return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                         shape=(4 * ng, 2 * mesh.num_nodes))


def soft_indicator(values: np.ndarray, delta1: float) -> np.ndarray:
    return (1.0 - delta1) * np.asarray(values) + delta1


# ---------------------------------------------------------------------------
# energy operators

class PairOperator:
    """The pair energy ``W_k`` as a function of ``(u_{k-1}, u_k)``.

    Quadrature points with the same element ``e`` and the same image element
    ``e'`` under ``psihat`` share their deformation gradients and are merged
    into one weighted group.
    """

    def __init__(self, mesh: Mesh, ref_values: np.ndarray, psi_disp: Optional[np.ndarray],
                 p: MaterialParams, weights_override: Optional[np.ndarray] = None):
        self.mesh = mesh
        self.p = p
        T = mesh.num_tris
        if weights_override is None:
            chi = soft_indicator(quadrature_values(mesh, ref_values), p.delta1)
            wq = chi * (QUAD_WEIGHTS * mesh.area)[None, :]
        else:
            wq = np.broadcast_to(weights_override, (T, 7))
        if psi_disp is None:
            elem = np.arange(T)
            img = elem
            weights = wq.sum(axis=1)
            psi_grad = np.broadcast_to(np.eye(2), (T, 2, 2))
        else:
            bary = (1 - _NUDGE) * QUAD_BARY + _NUDGE / 3.0      # step into the element interior
            verts = mesh.coords[mesh.tris]
            pts = np.einsum("qk,tkd->tqd", bary, verts)
            disp = np.einsum("qk,tkd->tqd", bary, np.asarray(psi_disp)[mesh.tris])
            tri_img, _ = locate(mesh, (pts + disp).reshape(-1, 2), clamp=True)
            key = np.repeat(np.arange(T), 7) * T + tri_img
            uniq, inv = np.unique(key, return_inverse=True)
            weights = np.bincount(inv, weights=wq.ravel())
            elem = uniq // T
            img = uniq % T
            psi_grad = element_gradients(mesh, psi_disp) + np.eye(2)
        self.elem = elem
        self.img = img
        self.weights = weights
        self.psi_grad = np.ascontiguousarray(psi_grad[elem])
        self.DA = _gradient_operator(mesh, elem, None)
        self.DG = _gradient_operator(mesh, img, self.psi_grad)
        self.DAT = self.DA.T.tocsr()
        self.DGT = self.DG.T.tocsr()

    def matrices(self, u_prev: np.ndarray, u_next: np.ndarray):
        ng = self.elem.shape[0]
        A = np.eye(2) + (self.DA @ np.ravel(u_prev)).reshape(ng, 2, 2)
        G = self.psi_grad + (self.DG @ np.ravel(u_next)).reshape(ng, 2, 2)
        return A, G

    def energy(self, u_prev, u_next) -> float:
        A, G = self.matrices(u_prev, u_next)
        f = pair_density(A, G, self.p, order=0)
        if not np.all(np.isfinite(f)):
            return INF
        return float(self.weights @ f)

    def derivatives(self, u_prev, u_next):
        """Energy, gradients ``(g_prev, g_next)`` and Hessian blocks ``(H_pp, H_pn, H_nn)``."""
        A, G = self.matrices(u_prev, u_next)
        f, grad, hess = pair_density(A, G, self.p, order=2)
        if not np.all(np.isfinite(f)):
            raise SolverError("singular configuration in pair energy")
        w = self.weights
        gw = grad * w[:, None]
        hw = hess * w[:, None, None]
        g_prev = self.DAT @ gw[:, :4].ravel()
        g_next = self.DGT @ gw[:, 4:].ravel()
        H_pp = self.DAT @ _block_diag(np.ascontiguousarray(hw[:, :4, :4])) @ self.DA
        H_pn = self.DAT @ _block_diag(np.ascontiguousarray(hw[:, :4, 4:])) @ self.DG
        H_nn = self.DGT @ _block_diag(np.ascontiguousarray(hw[:, 4:, 4:])) @ self.DG
        return float(w @ f), (g_prev, g_next), (H_pp, H_pn, H_nn)

    def element_density(self, u_prev, u_next) -> np.ndarray:
        """Energy per unit reference area on each element (for heat maps)."""
        A, G = self.matrices(u_prev, u_next)
        f = pair_density(A, G, self.p, order=0)
        out = np.bincount(self.elem, weights=self.weights * f, minlength=self.mesh.num_tris)
        return out / self.mesh.area

    def determinants(self, u_prev, u_next):
        A, G = self.matrices(u_prev, u_next)
        return np.linalg.det(A), np.linalg.det(G)


class RegularizerOperator:
    """``delta3 * int_D W(grad phi)``, the pair kernel with ``A = I``."""

    def __init__(self, mesh: Mesh, p: MaterialParams, weight: Optional[float] = None):
        self.weight = p.delta3 if weight is None else weight
        self.op = PairOperator(mesh, None, None, p,
                               weights_override=(QUAD_WEIGHTS * mesh.area)[None, :])
        self.zero = np.zeros(2 * mesh.num_nodes)

    def energy(self, u) -> float:
        if self.weight == 0.0:
            return 0.0
        e = self.op.energy(self.zero, u)
        return self.weight * e

    def derivatives(self, u):
        e, (_, g), (_, _, H) = self.op.derivatives(self.zero, u)
        return self.weight * e, self.weight * g, self.weight * H


class PenaltyOperator:
    """``1/eps int (S_hat - S_target o P(phi))^2`` with ``S = G_delta2 * chi``.

    The smoothed grid values are read through a bicubic spline, so the
    penalty is twice continuously differentiable in the displacement and
    Newton's method converges on it (the piecewise-affine read-out has
    gradient jumps across element edges).
    """

    def __init__(self, mesh: Mesh, ref_values: np.ndarray, target_values: np.ndarray, p: MaterialParams):
        self.mesh = mesh
        self.p = p
        X, W = all_quadrature_points(mesh)
        T = mesh.num_tris
        self.X = X.reshape(-1, 2)
        self.w = np.tile(W, T)
        self.S_hat = smoothed_spline(ref_values, mesh, p)(self.X[:, 1], self.X[:, 0], grid=False)
        self.S_t = smoothed_spline(target_values, mesh, p)
        nq = self.X.shape[0]
        rows = np.repeat(np.arange(nq), 3)
        cols = np.repeat(mesh.tris, 7, axis=0).ravel()
        vals = np.tile(QUAD_BARY, (T, 1)).ravel()
        keep = vals != 0
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        self.P = sp.csr_matrix((vals, (rows, cols)), shape=(nq, mesh.num_nodes))
        # the same interpolation acting on both components: row 2q + a, column 2n + a
        self.P2 = sp.csr_matrix((np.concatenate([vals, vals]),
                                 (np.concatenate([2 * rows, 2 * rows + 1]),
                                  np.concatenate([2 * cols, 2 * cols + 1]))),
                                shape=(2 * nq, 2 * mesh.num_nodes))
        self.P2T = self.P2.T.tocsr()

    def _images(self, u):
        y = self.X + self.P @ np.asarray(u).reshape(-1, 2)
        inside = ((y >= 0.0) & (y <= 1.0)).astype(float)
        return np.clip(y, 0.0, 1.0), inside

    def residual(self, u) -> np.ndarray:
        yc, _ = self._images(u)
        return self.S_hat - self.S_t(yc[:, 1], yc[:, 0], grid=False)

    def energy(self, u) -> float:
        r = self.residual(u)
        return float(self.w @ (r * r)) / self.p.epsilon

    def derivatives(self, u):
        yc, inside = self._images(u)
        yy, xx = yc[:, 1], yc[:, 0]
        spl = self.S_t
        r = self.S_hat - spl(yy, xx, grid=False)
        dS = np.stack([spl(yy, xx, dy=1, grid=False), spl(yy, xx, dx=1, grid=False)], axis=1) * inside
        sxy = spl(yy, xx, dx=1, dy=1, grid=False)
        d2S = np.stack([spl(yy, xx, dy=2, grid=False), sxy, sxy, spl(yy, xx, dx=2, grid=False)],
                       axis=1).reshape(-1, 2, 2) * (inside[:, :, None] * inside[:, None, :])
        c = 2.0 / self.p.epsilon
        g = self.P2T @ (c * (self.w * r)[:, None] * -dS).ravel()
        blocks = c * self.w[:, None, None] * (dS[:, :, None] * dS[:, None, :] - r[:, None, None] * d2S)
        H = self.P2T @ _block_diag(blocks) @ self.P2
        return float(self.w @ (r * r)) / self.p.epsilon, g, H.tocsr()


def smoothed_spline(values: np.ndarray, mesh: Mesh, p: MaterialParams) -> RectBivariateSpline:
    """Bicubic spline through the Gaussian-smoothed nodal values; call as ``spl(y, x)``."""
    S = gaussian_smooth(ScalarField(mesh, np.asarray(values, dtype=float)), p.filter_width(mesh.h)).values
    t = np.linspace(0.0, 1.0, mesh.n + 1)
    return RectBivariateSpline(t, t, mesh.grid(S), kx=3, ky=3)


# ---------------------------------------------------------------------------
# paths

@dataclass(frozen=True)
class EnergyBreakdown:
    """Parts of the total energy.  ``pair`` holds the raw ``W_k``; the total
    weights them by ``1/tau = K``."""

    pair: np.ndarray
    reg: np.ndarray
    penalty0: float
    penaltyK: float

    @property
    def K(self) -> int:
        return len(self.pair)

    @property
    def pair_term(self) -> float:
        return self.K * float(np.sum(self.pair))

    @property
    def total(self) -> float:
        return self.pair_term + float(np.sum(self.reg)) + self.penalty0 + self.penaltyK


@dataclass
class DiscretePath:
    """References ``Ohat_k``, reference matchings ``psihat_k`` (``None`` means
    identity) and parameterizing displacements ``u_k = phi_k - id``."""

    mesh: Mesh
    refs: List[ShapeMask]
    psi: List[Optional[np.ndarray]]
    u: List[np.ndarray]
    pristine: bool = True

    def __post_init__(self):
        K = len(self.u) - 1
        if K < 1 or len(self.refs) != K + 1 or len(self.psi) != K:
            raise ValueError("inconsistent path lengths")
        for m in self.refs:
            if m.mesh.level != self.mesh.level:
                raise ValueError("references on a different mesh level")

    @property
    def K(self) -> int:
        return len(self.u) - 1

    @property
    def tau(self) -> float:
        return 1.0 / self.K

    @property
    def level(self) -> int:
        return self.mesh.level

    @classmethod
    def initial(cls, O0: ShapeMask, K: int) -> "DiscretePath":
        mesh = O0.mesh
        zero = np.zeros((mesh.num_nodes, 2))
        return cls(mesh, [O0] * (K + 1), [None] * K, [zero.copy() for _ in range(K + 1)])

    def deformations(self) -> List[Deformation]:
        return [Deformation(self.mesh, u) for u in self.u]

    def positions(self, k: int) -> np.ndarray:
        return self.mesh.coords + self.u[k]

    def shape_values(self, k: int) -> np.ndarray:
        """Soft mask of ``O_k = phi_k(Ohat_k)`` on the mesh nodes."""
        return np.clip(pushforward_values(self.mesh, self.positions(k), self.refs[k].values), 0.0, 1.0)

    def shapes(self) -> List[ShapeMask]:
        return [ShapeMask(self.mesh, (self.shape_values(k) >= 0.5).astype(float)) for k in range(self.K + 1)]

    def reference_chain(self) -> List[np.ndarray]:
        """Positions of ``psihat_k o ... o psihat_1`` at the nodes."""
        cur = self.mesh.coords.copy()
        out = [cur]
        for psi in self.psi:
            if psi is not None:
                cur = compose(self.mesh, self.mesh.coords + psi, cur)
            out.append(cur)
        return out

    def composed_maps(self) -> List[np.ndarray]:
        """Nodal positions of ``Phi_k = phi_k o psihat_k o ... o psihat_1``.

        ``Phi_k`` maps the frame of ``Ohat_0`` onto ``O_k``; the matching of
        ``O_0`` onto ``O_j`` is ``Phi_j o Phi_0^-1``.
        """
        chain = self.reference_chain()
        return [compose(self.mesh, self.positions(k), chain[k]) for k in range(self.K + 1)]

    def copy(self) -> "DiscretePath":
        return DiscretePath(self.mesh, list(self.refs), list(self.psi), [u.copy() for u in self.u],
                            self.pristine)


class PathProblem:
    """Total energy of a path with frozen references, as a function of all ``u_k``."""

    def __init__(self, path: DiscretePath, O0: Optional[ShapeMask], OK: Optional[ShapeMask],
                 p: MaterialParams, reg_weight: Optional[float] = None):
        mesh = path.mesh
        self.mesh = mesh
        self.K = path.K
        self.p = p
        self.pairs = [PairOperator(mesh, path.refs[k - 1].values, path.psi[k - 1], p)
                      for k in range(1, self.K + 1)]
        self.reg = RegularizerOperator(mesh, p, reg_weight)
        self.pen0 = None if O0 is None else PenaltyOperator(mesh, path.refs[0].values, O0.values, p)
        self.penK = None if OK is None else PenaltyOperator(mesh, path.refs[-1].values, OK.values, p)
        self.ndof = 2 * mesh.num_nodes

    def split(self, x: np.ndarray) -> List[np.ndarray]:
        return list(np.asarray(x).reshape(self.K + 1, self.ndof))

    def breakdown(self, x) -> EnergyBreakdown:
        U = self.split(x)
        pair = np.array([op.energy(U[k], U[k + 1]) for k, op in enumerate(self.pairs)])
        reg = np.array([self.reg.energy(u) for u in U])
        p0 = 0.0 if self.pen0 is None else self.pen0.energy(U[0])
        pK = 0.0 if self.penK is None else self.penK.energy(U[-1])
        return EnergyBreakdown(pair, reg, p0, pK)

    def value(self, x) -> float:
        U = self.split(x)
        total = 0.0
        for k, op in enumerate(self.pairs):
            total += self.K * op.energy(U[k], U[k + 1])
            if not math.isfinite(total):
                return INF
        for u in U:
            total += self.reg.energy(u)
            if not math.isfinite(total):
                return INF
        if self.pen0 is not None:
            total += self.pen0.energy(U[0])
        if self.penK is not None:
            total += self.penK.energy(U[-1])
        return total

    def gradient_hessian(self, x):
        U = self.split(x)
        K, n = self.K, self.ndof
        g = np.zeros((K + 1, n))
        diag = [sp.csr_matrix((n, n)) for _ in range(K + 1)]
        upper = []
        for k, op in enumerate(self.pairs):
            _, (gp, gn), (Hpp, Hpn, Hnn) = op.derivatives(U[k], U[k + 1])
            g[k] += K * gp
            g[k + 1] += K * gn
            diag[k] = diag[k] + K * Hpp
            diag[k + 1] = diag[k + 1] + K * Hnn
            upper.append((K * Hpn).tocsr())
        if self.reg.weight != 0.0:
            for k in range(K + 1):
                _, gr, Hr = self.reg.derivatives(U[k])
                g[k] += gr
                diag[k] = diag[k] + Hr
        for k, pen in ((0, self.pen0), (K, self.penK)):
            if pen is not None:
                _, gpn, Hpn_ = pen.derivatives(U[k])
                g[k] += gpn
                diag[k] = diag[k] + Hpn_
        return g.ravel(), BlockHessian([d.tocsr() for d in diag], upper)


@dataclass
class BlockHessian:
    """Symmetric block-tridiagonal matrix: ``diag[k]`` is block ``(k, k)`` and
    ``upper[k]`` block ``(k, k + 1)``; all other blocks are structural zeros."""

    diag: List[sp.csr_matrix]
    upper: List[sp.csr_matrix]

    @property
    def nblocks(self) -> int:
        return len(self.diag)

    def block(self, i: int, j: int):
        if i == j:
            return self.diag[i]
        if j == i + 1:
            return self.upper[i]
        if i == j + 1:
            return self.upper[j].T.tocsr()
        return None

    def to_sparse(self, keep: Optional[Sequence[int]] = None) -> sp.csr_matrix:
        idx = list(range(self.nblocks)) if keep is None else list(keep)
        rows = [[self.block(i, j) for j in idx] for i in idx]
        return sp.bmat(rows, format="csr")


def energy_gradient_hessian(path: DiscretePath, O0: ShapeMask, OK: ShapeMask, p: MaterialParams):
    """Gradient over all nodal unknowns of ``phi_0 .. phi_K`` and the block Hessian."""
    prob = PathProblem(path, O0, OK, p)
    x = np.concatenate([u.ravel() for u in path.u])
    if not math.isfinite(prob.value(x)):
        raise SolverError("singular configuration: infinite energy")
    return prob.gradient_hessian(x)


# ---------------------------------------------------------------------------
# the public single-term energies

def _disp(phi) -> np.ndarray:
    return phi.values if isinstance(phi, Deformation) else np.asarray(phi)


def pair_energy(Ohat: ShapeMask, psihat: Optional[Deformation], phi_prev: Deformation,
                phi_next: Deformation, p: MaterialParams) -> float:
    mesh = Ohat.mesh
    psi = None if psihat is None else _disp(psihat)
    return PairOperator(mesh, Ohat.values, psi, p).energy(_disp(phi_prev), _disp(phi_next))


def mismatch_penalty(Ohat: ShapeMask, O_target: ShapeMask, phi: Deformation, p: MaterialParams) -> float:
    return PenaltyOperator(Ohat.mesh, Ohat.values, O_target.values, p).energy(_disp(phi))


def regularizer(phi: Deformation, p: MaterialParams) -> float:
    return RegularizerOperator(phi.mesh, p).energy(_disp(phi))


def total_energy(path: DiscretePath, O0: ShapeMask, OK: ShapeMask, p: MaterialParams) -> EnergyBreakdown:
    prob = PathProblem(path, O0, OK, p)
    return prob.breakdown(np.concatenate([u.ravel() for u in path.u]))


def discrete_length(pair_energies) -> float:
    W = np.asarray(pair_energies, dtype=float)
    return float(np.sum(np.sqrt(np.maximum(W, 0.0))))


def discrete_energy(pair_energies) -> float:
    W = np.asarray(pair_energies, dtype=float)
    return float(len(W) * np.sum(W))


def path_pair_energies(path: DiscretePath, p: MaterialParams) -> np.ndarray:
    return np.array([PairOperator(path.mesh, path.refs[k - 1].values, path.psi[k - 1], p)
                     .energy(path.u[k - 1], path.u[k]) for k in range(1, path.K + 1)])


def matching_determinants(path: DiscretePath, p: MaterialParams) -> List[np.ndarray]:
    """det of the composed matching gradient at every quadrature group, per step."""
    out = []
    for k in range(1, path.K + 1):
        op = PairOperator(path.mesh, path.refs[k - 1].values, path.psi[k - 1], p)
        dA, dG = op.determinants(path.u[k - 1], path.u[k])
        out.append(dG / dA)
    return out


def dissipation_maps(path: DiscretePath, p: MaterialParams) -> List[np.ndarray]:
    """Per-step elementwise pair integrand, pushed to nodes of ``O_{k-1}``."""
    mesh = path.mesh
    maps = []
    for k in range(1, path.K + 1):
        op = PairOperator(mesh, path.refs[k - 1].values, path.psi[k - 1], p)
        dens = op.element_density(path.u[k - 1], path.u[k])
        nodal = np.bincount(mesh.tris.ravel(), weights=np.repeat(dens, 3), minlength=mesh.num_nodes)
        nodal /= np.bincount(mesh.tris.ravel(), minlength=mesh.num_nodes)
        maps.append(pushforward_values(mesh, path.positions(k - 1), nodal))
    return maps


# ---------------------------------------------------------------------------
# solver

@dataclass(frozen=True)
class SolverConfig:
    """Newton trust-region and cascade settings.

    ``schedule`` lists ``(mesh level, K)`` stages solved in order; levels
    must not decrease and each K must be a power-of-two multiple of the
    previous one.  ``delta0=None`` starts with two mesh widths.

    After the last stage the references are re-based ``polish_resets``
    times and the path re-solved; this removes the pull of the
    ``delta3`` regularizer towards the initial references.
    """

    tol: float = 1e-6
    abs_tol: float = 1e-10
    max_iter: int = 200
    delta0: Optional[float] = None
    delta_max: float = 0.25
    schedule: Tuple[Tuple[int, int], ...] = ((5, 2), (6, 4))
    reset_threshold: float = 0.15
    max_resets: int = 20
    polish_resets: int = 2
    log_path: Optional[str] = None

    def __post_init__(self):
        if not (self.tol > 0 and self.abs_tol > 0 and self.max_iter > 0):
            raise ValueError("tolerances and iteration counts must be positive")
        if not self.schedule:
            raise ValueError("empty cascade schedule")
        prev_level, prev_K = self.schedule[0]
        for level, K in self.schedule:
            if level < prev_level:
                raise ValueError("cascade levels must not decrease")
            ratio = K / prev_K
            if K < 1 or ratio < 1 or ratio != int(ratio) or int(ratio) & (int(ratio) - 1):
                raise ValueError("each K must be a power-of-two multiple of the previous K")
            prev_level, prev_K = level, K

    def with_schedule(self, schedule) -> "SolverConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["schedule"] = tuple(tuple(s) for s in schedule)
        return SolverConfig(**d)

    def for_K(self, K: int) -> "SolverConfig":
        """The same cascade with the final number of steps set to ``K``."""
        last = self.schedule[-1][1]
        if K == last:
            return self
        ratio = K / last
        if ratio > 1 and ratio == int(ratio) and not int(ratio) & (int(ratio) - 1):
            Ks = [k * int(ratio) for _, k in self.schedule]
        elif ratio < 1 and (1 / ratio) == int(1 / ratio) and not int(1 / ratio) & (int(1 / ratio) - 1):
            Ks = [max(1, k // int(1 / ratio)) for _, k in self.schedule]
        else:
            Ks = [K] * len(self.schedule)
        return self.with_schedule([(lv, k) for (lv, _), k in zip(self.schedule, Ks)])


@dataclass
class PathResult:
    path: DiscretePath
    breakdown: EnergyBreakdown
    history: List[dict] = field(default_factory=list)
    gnorm: float = 0.0
    resets: int = 0


LOG_COLUMNS = ("iter", "level", "K", "total", "sum_pair", "sum_reg", "penalty0", "penaltyK",
               "trust_radius", "step_accepted")


def write_energy_log(path, history: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow(row)


def refine_time(path: DiscretePath) -> DiscretePath:
    """Double K by inserting ``phi_mid = (phi_{k-1} + phi_k o psihat_k) / 2``."""
    mesh = path.mesh
    refs, psi, u = [path.refs[0]], [], [path.u[0]]
    for k in range(1, path.K + 1):
        prev_pos = path.positions(k - 1)
        nxt_pos = path.positions(k)
        if path.psi[k - 1] is not None:
            nxt_pos = compose(mesh, nxt_pos, mesh.coords + path.psi[k - 1])
        mid = 0.5 * (prev_pos + nxt_pos) - mesh.coords
        ok = np.all(np.linalg.det(element_gradients(mesh, mid) + np.eye(2)) > 0)
        refs += [path.refs[k - 1], path.refs[k]]
        psi += [None, path.psi[k - 1]]
        u += [mid if ok else path.u[k - 1].copy(), path.u[k]]
    return DiscretePath(mesh, refs, psi, [x.copy() for x in u], path.pristine)


def refine_space(path: DiscretePath, O0_source: ShapeMask) -> DiscretePath:
    level = path.level
    fine = make_mesh(level + 1)
    if path.pristine:
        ref = mask_at_level(O0_source, level + 1)
        refs = [ref] * (path.K + 1)
    else:
        refs = [ShapeMask(fine, np.clip(prolongate_values(level, r.values), 0.0, 1.0)) for r in path.refs]
    psi = [None if s is None else prolongate_values(level, s) for s in path.psi]
    u = [prolongate_values(level, x) for x in path.u]
    return DiscretePath(fine, refs, psi, u, path.pristine)


def shape_displacement(path: DiscretePath, U) -> float:
    """Largest nodal displacement over the reference shapes, after removing
    the best rigid fit (rigid motions do not degrade a parameterization)."""
    out = 0.0
    x = path.mesh.coords
    for k, u in enumerate(U):
        on = path.refs[k].values >= 0.5
        if np.any(on):
            y = x[on] + np.asarray(u).reshape(-1, 2)[on]
            theta, cx, cy = rigid_fit(x[on], y, np.ones(y.shape[0]))
            out = max(out, float(np.abs(y - rotate_about(x[on], theta, cx, cy)).max()))
    return out


def reset_references(path: DiscretePath) -> DiscretePath:
    """Re-base every reference: ``Ohat_k <- O_k``, ``psihat_k <- psi_k``, ``phi_k <- id``."""
    mesh = path.mesh
    K = path.K
    new_refs = [ShapeMask(mesh, path.shape_values(k)) for k in range(K + 1)]
    new_psi = []
    for k in range(1, K + 1):
        # psi_k(y) = phi_k(psihat_k(phi_{k-1}^-1(y)))
        y = inverse_positions(mesh, path.positions(k - 1))
        if path.psi[k - 1] is not None:
            y = compose(mesh, mesh.coords + path.psi[k - 1], y)
        z = compose(mesh, path.positions(k), y)
        new_psi.append(z - mesh.coords)
    zero = np.zeros((mesh.num_nodes, 2))
    return DiscretePath(mesh, new_refs, new_psi, [zero.copy() for _ in range(K + 1)], pristine=False)


def _history_row(it, level, K, bd: EnergyBreakdown, delta, accepted):
    return dict(iter=it, level=level, K=K, total=bd.total, sum_pair=bd.pair_term,
                sum_reg=float(np.sum(bd.reg)), penalty0=bd.penalty0, penaltyK=bd.penaltyK,
                trust_radius=delta, step_accepted=int(accepted))


def gauge_dofs(mesh: Mesh, ref_values: np.ndarray) -> List[int]:
    """Three displacement components that fix a rigid motion: both components
    at the node nearest the shape's centroid, and the vertical component at a
    node of the shape farthest from it along x."""
    on = np.nonzero(ref_values >= 0.5)[0]
    if on.size < 2:
        on = np.arange(mesh.num_nodes)
    c = mesh.coords[on].mean(axis=0)
    a = on[np.argmin(np.sum((mesh.coords[on] - c) ** 2, axis=1))]
    row = on[np.abs(mesh.coords[on, 1] - mesh.coords[a, 1]) < 0.5 * mesh.h]
    b = row[np.argmax(np.abs(mesh.coords[row, 0] - mesh.coords[a, 0]))] if row.size > 1 else on[np.argmax(
        np.sum((mesh.coords[on] - mesh.coords[a]) ** 2, axis=1))]
    return [2 * a, 2 * a + 1, 2 * b + 1 if b != a else 2 * b]


def rigid_fit(P: np.ndarray, Q: np.ndarray, w: np.ndarray):
    """Best rigid fit ``Q ~ R(theta) (P - cP) + cQ`` in the weighted least-squares sense.

    Returns ``(theta, cP, cQ)`` with the weighted centroids ``cP``, ``cQ``.
    """
    w = np.asarray(w, dtype=float)
    w = w / w.sum()
    cP, cQ = w @ P, w @ Q
    a, b = (P - cP) * w[:, None], Q - cQ
    cos = np.sum(a * b)
    sin = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    return math.atan2(sin, cos), cP, cQ


def rotate_about(X: np.ndarray, theta: float, center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Rotate ``X`` by ``theta`` about ``center`` and move ``center`` to ``target``."""
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s], [s, c]])
    return (X - center) @ R.T + target


def gauge_weights(path: DiscretePath) -> np.ndarray:
    w = (path.refs[0].values >= 0.5).astype(float)
    return w if w.any() else np.ones(path.mesh.num_nodes)


def normalize_gauge(path: DiscretePath) -> DiscretePath:
    """Re-place the interior shapes so that their rigid parts interpolate linearly.

    Pair energies and the regularizer are invariant under a rigid motion of
    any single ``phi_k``, so interior shapes are only determined up to rigid
    motions.  This picks the placement whose best-fit rotation angle and
    centroid, relative to ``O_0``, vary linearly in ``k``.
    """
    K = path.K
    if K < 2:
        return path
    maps = path.composed_maps()
    w = gauge_weights(path)
    theta_K, c0, cK = rigid_fit(maps[0], maps[K], w)
    u = [x.copy() for x in path.u]
    for k in range(1, K):
        theta_k, _, ck = rigid_fit(maps[0], maps[k], w)
        t = k / K
        pos = rotate_about(path.positions(k), t * theta_K - theta_k, ck, c0 + t * (cK - c0))
        u[k] = pos - path.mesh.coords
    return DiscretePath(path.mesh, path.refs, path.psi, u, path.pristine)


def solve_stage(path: DiscretePath, O0: ShapeMask, OK: Optional[ShapeMask], cfg: SolverConfig,
                p: MaterialParams, history: List[dict], free: Optional[Sequence[int]] = None,
                reg_weight: Optional[float] = None, allow_reset: bool = True,
                gnorm_ref: Optional[float] = None):
    """Minimize the total energy of ``path`` for its current references.

    ``free`` restricts the unknowns to the listed ``k`` (default: all);
    with ``OK=None`` and ``O0=None`` there are no penalty terms.  Returns
    ``(path, converged, gnorm, resets)``.
    """
    resets = 0
    free = list(range(path.K + 1)) if free is None else list(free)
    h = path.mesh.h
    tr = TRConfig(max_iter=cfg.max_iter, gtol_abs=cfg.abs_tol, gtol_rel=cfg.tol,
                  delta0=cfg.delta0 if cfg.delta0 is not None else 2 * h, delta_max=cfg.delta_max)
    it_base = len(history)
    while True:
        prob = PathProblem(path, O0, OK, p, reg_weight)
        full = np.concatenate([u.ravel() for u in path.u])
        n = prob.ndof
        sel = np.concatenate([np.arange(k * n, (k + 1) * n) for k in free])

        def assemble(z):
            y = full.copy()
            y[sel] = z
            return y

        def fun(z):
            return prob.value(assemble(z))

        # pin three displacement components of every gauge-free block
        pinned = [k * n + d for k in free
                  if 0 < k < path.K or (O0 is None and k == 0) or (OK is None and k == path.K)
                  for d in gauge_dofs(path.mesh, path.refs[k].values)]
        keep = ~np.isin(sel, pinned)
        sub = np.nonzero(keep)[0]
        sel = sel[keep]

        def grad_hess(z):
            g, H = prob.gradient_hessian(assemble(z))
            Hs = H.to_sparse(keep=free)[sub][:, sub]
            return g[sel], Hs

        snapshots = {}

        def callback(it, z, info):
            snapshots[it] = prob.breakdown(assemble(z))
            if allow_reset and cfg.reset_threshold > 0 and resets < cfg.max_resets:
                U = prob.split(assemble(z))
                return shape_displacement(path, U) > cfg.reset_threshold
            return False

        x0 = full[sel]
        if gnorm_ref is None:
            g0 = grad_hess(x0)[0]
            gnorm_ref = float(np.linalg.norm(g0))
        current = prob.breakdown(full)
        res = trust_region_newton(fun, grad_hess, x0, tr, callback=callback, gnorm_ref=gnorm_ref)
        for step in res.history:
            if step["accepted"]:
                current = snapshots[step["iter"]]
            history.append(_history_row(len(history) - it_base + 1, path.level, path.K, current,
                                        step["delta"], step["accepted"]))
        y = prob.split(assemble(res.x))
        path = DiscretePath(path.mesh, path.refs, path.psi, [u.reshape(-1, 2).copy() for u in y],
                            path.pristine)
        if res.stopped and not res.converged:
            candidate = reset_references(path)
            zero = np.zeros(prob.ndof * (path.K + 1))
            if math.isfinite(PathProblem(candidate, O0, OK, p, reg_weight).value(zero)):
                path = candidate
                resets += 1
                log.info("reference reset %d at level %d, K=%d", resets, path.level, path.K)
            else:
                allow_reset = False
                log.info("reference reset skipped: resampled matching folds")
            continue
        return path, res.converged, res.gnorm, resets


def minimize_path(O0: ShapeMask, OK: ShapeMask, cfg: SolverConfig = SolverConfig(),
                  p: MaterialParams = MaterialParams()) -> PathResult:
    """Cascadic trust-region minimization of the discrete path energy.

    Raises :class:`SolverError` (with ``iterate`` set to the last path) when
    the final stage does not reach the gradient tolerance.
    """
    if not O0.binary().any() or not OK.binary().any():
        raise ValueError("endpoint masks must be nonempty")
    history: List[dict] = []
    path = None
    total_resets = 0
    gnorm = math.nan
    converged = False
    for si, (level, K) in enumerate(cfg.schedule):
        src0 = mask_at_level(O0, level)
        srcK = mask_at_level(OK, level)
        if path is None:
            path = DiscretePath.initial(src0, K)
        else:
            while path.level < level:
                path = refine_space(path, O0)
            while path.K < K:
                path = refine_time(path)
        if path.pristine:
            path = DiscretePath(path.mesh, [src0] * (path.K + 1), path.psi, path.u, True)
        path, converged, gnorm, r = solve_stage(path, src0, srcK, cfg, p, history)
        total_resets += r
        log.info("stage %d (level %d, K=%d): |g| = %.3e, converged=%s", si, level, K, gnorm, converged)
    src0 = mask_at_level(O0, path.level)
    srcK = mask_at_level(OK, path.level)
    if cfg.polish_resets and converged:
        # tolerance scale of the problem itself, not of the nearly optimal restart
        init = DiscretePath.initial(src0, path.K)
        g0, _ = PathProblem(init, src0, srcK, p).gradient_hessian(np.zeros(init.mesh.num_nodes * 2 * (init.K + 1)))
        scale = float(np.linalg.norm(g0))
    for _ in range(cfg.polish_resets if converged else 0):
        candidate = reset_references(path)
        if not math.isfinite(total_energy(candidate, src0, srcK, p).total):
            break
        polished, ok, g, r = solve_stage(candidate, src0, srcK, cfg, p, history, allow_reset=False,
                                         gnorm_ref=scale)
        if not ok:
            log.info("polish pass stopped at |g| = %.3e; keeping the previous path", g)
            break
        path, gnorm = polished, g
        total_resets += 1
    path = normalize_gauge(path)
    bd = total_energy(path, src0, srcK, p)
    if cfg.log_path:
        write_energy_log(cfg.log_path, history)
    result = PathResult(path, bd, history, gnorm, total_resets)
    if not converged:
        raise SolverError(f"path solver did not converge (|g| = {gnorm:.3e})", iterate=result,
                          history=history)
    check_path(path, bd, p)
    return result


def check_path(path: DiscretePath, bd: EnergyBreakdown, p: MaterialParams) -> None:
    """Hard postconditions of a converged path: ``E >= L^2`` and orientation
    preserving composed matchings at every quadrature point."""
    E, L = discrete_energy(bd.pair), discrete_length(bd.pair)
    assert E >= L * L * (1 - 1e-12), f"E = {E} < L^2 = {L * L}"
    dets = matching_determinants(path, p)
    assert all(np.all(d > 0) for d in dets), "a composed matching lost orientation"

