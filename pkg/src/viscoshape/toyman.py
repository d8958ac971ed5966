"""Discrete geodesic calculus on embedded surfaces with the spring energy.

A point on a parameterized surface ``f: R^2 -> R^3`` is a parameter pair;
the deformation energy of a step is the squared ambient displacement
``|f(p_k) - f(p_{k-1})|^2``.  Discrete geodesics, logarithm, exponential and
Schild's ladder then have closed-form continuous counterparts on the plane
and the sphere, which makes these surfaces independent oracles for the
discrete calculus.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .solvers import SolverError, block_tridiag_solve
from .transport import LadderSpace, ladder_transport


@dataclass(frozen=True)
class EmbeddedSurface:
    """Parameterization ``f`` with Jacobian ``jac`` (3x2) and second
    derivatives ``hess`` (3x2x2); ``closest`` optionally maps an ambient
    point to the parameters of its closest surface point."""

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    bounds: tuple = ((0.0, 1.0), (0.0, 1.0))
    closest: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def normal(self, w) -> np.ndarray:
        J = self.jac(np.asarray(w, dtype=float))
        n = np.cross(J[:, 0], J[:, 1])
        return n / np.linalg.norm(n)

    def project(self, y, guess=None, tol: float = 1e-14, max_iter: int = 50) -> np.ndarray:
        """Parameters of the surface point closest to the ambient point ``y``."""
        y = np.asarray(y, dtype=float)
        if self.closest is not None:
            return self.closest(y)
        w = np.array(guess if guess is not None else y[:2], dtype=float)
        for _ in range(max_iter):
            r = self.f(w) - y
            J = self.jac(w)
            g = J.T @ r
            H = J.T @ J + np.einsum("c,cij->ij", r, self.hess(w))
            try:
                dw = -np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                dw = -np.linalg.lstsq(J.T @ J, g, rcond=None)[0]
            if np.linalg.eigvalsh(0.5 * (H + H.T)).min() <= 0:
                dw = -np.linalg.solve(J.T @ J, g)
            w = w + dw
            if np.linalg.norm(dw) <= tol * (1 + np.linalg.norm(w)):
                break
        return w


def plane() -> EmbeddedSurface:
    return EmbeddedSurface(
        "plane",
        f=lambda w: np.array([w[0], w[1], 0.0]),
        jac=lambda w: np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]),
        hess=lambda w: np.zeros((3, 2, 2)),
        closest=lambda y: np.array(y[:2], dtype=float),
    )


def sphere() -> EmbeddedSurface:
    """Unit sphere patch in longitude/latitude ``(u, v)``."""

    def f(w):
        u, v = w
        return np.array([math.cos(v) * math.cos(u), math.cos(v) * math.sin(u), math.sin(v)])

    def jac(w):
        u, v = w
        cu, su, cv, sv = math.cos(u), math.sin(u), math.cos(v), math.sin(v)
        return np.array([[-cv * su, -sv * cu], [cv * cu, -sv * su], [0.0, cv]])

    def hess(w):
        u, v = w
        cu, su, cv, sv = math.cos(u), math.sin(u), math.cos(v), math.sin(v)
        H = np.zeros((3, 2, 2))
        H[0] = [[-cv * cu, sv * su], [sv * su, -cv * cu]]
        H[1] = [[-cv * su, -sv * cu], [-sv * cu, -cv * su]]
        H[2] = [[0.0, 0.0], [0.0, -sv]]
        return H

    def closest(y):
        y = y / np.linalg.norm(y)
        return np.array([math.atan2(y[1], y[0]), math.asin(np.clip(y[2], -1.0, 1.0))])

    return EmbeddedSurface("sphere", f, jac, hess, ((-math.pi, math.pi), (-1.4, 1.4)), closest)


def bump(height: float = 1.5, width: float = 0.1, center=(0.5, 0.5)) -> EmbeddedSurface:
    """Graph of a narrow Gaussian bump ``z = height exp(-|w - c|^2 / (2 width^2))``."""
    c = np.asarray(center, dtype=float)
    s2 = width ** 2

    def z(w):
        d = np.asarray(w) - c
        return height * math.exp(-(d @ d) / (2 * s2))

    def f(w):
        return np.array([w[0], w[1], z(w)])

    def jac(w):
        d = np.asarray(w) - c
        gz = -z(w) * d / s2
        return np.array([[1.0, 0.0], [0.0, 1.0], [gz[0], gz[1]]])

    def hess(w):
        d = np.asarray(w) - c
        H = np.zeros((3, 2, 2))
        H[2] = z(w) * (np.outer(d, d) / s2 ** 2 - np.eye(2) / s2)
        return H

    return EmbeddedSurface("bump", f, jac, hess)


# ---------------------------------------------------------------------------
# geodesics

@dataclass
class ToyPath:
    surface: EmbeddedSurface
    params: np.ndarray                 # (K + 1, 2)

    @property
    def K(self) -> int:
        return self.params.shape[0] - 1

    @property
    def points(self) -> np.ndarray:
        return np.array([self.surface.f(w) for w in self.params])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.points, axis=0)

    def energy(self) -> float:
        return float(self.K * np.sum(self.steps ** 2))

    def length(self) -> float:
        return float(np.sum(np.linalg.norm(self.steps, axis=1)))


def toy_discrete_geodesic(a, b, K: int, surface: EmbeddedSurface, tol: float = 1e-13,
                          max_iter: int = 100, init: Optional[np.ndarray] = None) -> ToyPath:
    """Minimize ``K sum |f(p_k) - f(p_{k-1})|^2`` over the interior parameters.

    Newton steps use the block-tridiagonal Hessian (shifted when indefinite)
    with a backtracking line search.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if K < 1:
        raise ValueError("K must be positive")
    P = np.array(init, dtype=float) if init is not None else \
        a + np.linspace(0.0, 1.0, K + 1)[:, None] * (b - a)
    if K == 1:
        return ToyPath(surface, P)

    def energy(P):
        X = np.array([surface.f(w) for w in P])
        return K * float(np.sum(np.diff(X, axis=0) ** 2))

    E = energy(P)
    for _ in range(max_iter):
        X = np.array([surface.f(w) for w in P])
        J = [surface.jac(w) for w in P]
        g, diag, upper = [], [], []
        for k in range(1, K):
            r = 2 * X[k] - X[k - 1] - X[k + 1]
            g.append(2 * K * J[k].T @ r)
            diag.append(2 * K * (2 * J[k].T @ J[k] + np.einsum("c,cij->ij", r, surface.hess(P[k]))))
            if k < K - 1:
                upper.append(-2 * K * J[k].T @ J[k + 1])
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol * max(1.0, E):
            return ToyPath(surface, P)
        sigma = 0.0
        for _ in range(60):
            D = [d + sigma * np.eye(2) for d in diag]
            dx, S = block_tridiag_solve(D, upper, [-x for x in g], return_pivots=True)
            if all(np.all(np.linalg.eigvalsh(0.5 * (s + s.T)) > 0) for s in S):
                break
            sigma = max(1e-8, 10 * sigma)
        dx = np.array(dx)
        t = 1.0
        while t > 1e-12:
            Q = P.copy()
            Q[1:K] += t * dx
            E_new = energy(Q)
            if E_new <= E - 1e-4 * t * float(np.sum(np.array(g) * -dx)) or abs(E_new - E) <= 1e-15 * E:
                break
            t *= 0.5
        if t <= 1e-12:
            raise SolverError("toy geodesic line search failed", iterate=P)
        P, E = Q, E_new
    raise SolverError("toy geodesic did not converge", iterate=P)


def toy_exp2(surface: EmbeddedSurface, p0, p1, tol: float = 1e-14, max_iter: int = 50) -> np.ndarray:
    """End point ``p2`` with ``(p0, p1, p2)`` a discrete 2-geodesic:
    ``J(p1)^T (2 f(p1) - f(p0) - f(p2)) = 0``."""
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    x0, x1 = surface.f(p0), surface.f(p1)
    J1 = surface.jac(p1)
    q = surface.project(2 * x1 - x0, guess=2 * p1 - p0)
    for _ in range(max_iter):
        F = J1.T @ (2 * x1 - x0 - surface.f(q))
        dF = -J1.T @ surface.jac(q)
        dq = -np.linalg.solve(dF, F)
        q = q + dq
        if np.linalg.norm(dq) <= tol * (1 + np.linalg.norm(q)):
            break
    return q


def toy_exp_k(surface: EmbeddedSurface, a, zeta, k: int) -> np.ndarray:
    """Parameters ``p_0 .. p_k`` of the discrete exponential flow from ``a``
    with first step ``zeta`` (an ambient vector); ``p_1`` is the surface
    point closest to ``f(a) + zeta``."""
    a = np.asarray(a, dtype=float)
    P = [a, surface.project(surface.f(a) + np.asarray(zeta), guess=a)]
    for _ in range(2, k + 1):
        P.append(toy_exp2(surface, P[-2], P[-1]))
    return np.array(P)


# ---------------------------------------------------------------------------
# closed-form sphere maps

def sphere_log(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Riemannian logarithm on the unit sphere (ambient coordinates)."""
    c = float(np.clip(x @ y, -1.0, 1.0))
    theta = math.acos(c)
    w = y - c * x
    n = np.linalg.norm(w)
    return np.zeros(3) if n == 0 else theta * w / n


def sphere_exp(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    t = np.linalg.norm(v)
    return x.copy() if t == 0 else math.cos(t) * x + math.sin(t) * v / t


def spherical_excess(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> float:
    """Area of the geodesic triangle on the unit sphere (ambient vertices)."""
    num = abs(float(a @ np.cross(b, c)))
    den = 1.0 + a @ b + b @ c + c @ a
    return 2.0 * math.atan2(num, den)


def toy_log_exp_convergence(a, b, surface: EmbeddedSurface, Ks: Sequence[int] = (1, 2, 4, 8)) -> List[Dict]:
    """Errors of ``K zeta_1(K)`` against the exact logarithm and of
    ``Exp^K(log / K)`` against the exact exponential, for every ``K``.

    Exact maps are known on the plane and the sphere.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    xa, xb = surface.f(a), surface.f(b)
    if surface.name == "plane":
        log_ab, exp_of = xb - xa, (lambda v: xa + v)
    elif surface.name == "sphere":
        log_ab, exp_of = sphere_log(xa, xb), (lambda v: sphere_exp(xa, v))
    else:
        raise ValueError("exact maps are available for the plane and the sphere only")
    target = exp_of(log_ab)
    rows = []
    for K in Ks:
        path = toy_discrete_geodesic(a, b, K, surface)
        zeta1 = path.points[1] - xa
        flow = toy_exp_k(surface, a, log_ab / K, K)
        rows.append(dict(K=K, log_error=float(np.linalg.norm(K * zeta1 - log_ab)),
                         exp_error=float(np.linalg.norm(surface.f(flow[-1]) - target))))
    return rows


# ---------------------------------------------------------------------------
# exhaustive minimizers on a parameter grid

def grid_minimizer(surface: EmbeddedSurface, a, b, K: int, n: int = 41, kind: str = "energy",
                   tie: float = 1e-9) -> ToyPath:
    """Exact minimizer over all ``K``-step paths through the nodes of an
    ``n x n`` parameter grid (dynamic programming).

    ``kind="energy"`` minimizes ``sum |step|^2``; ``kind="length"`` minimizes
    ``sum |step|`` with ties broken by ``tie * sum |step|^2``.  ``a`` and
    ``b`` are snapped to the nearest grid nodes.
    """
    (u0, u1), (v0, v1) = surface.bounds
    us, vs = np.linspace(u0, u1, n), np.linspace(v0, v1, n)
    W = np.array([[u, v] for v in vs for u in us])
    X = np.array([surface.f(w) for w in W])
    D2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
    if kind == "energy":
        C = D2
    elif kind == "length":
        C = np.sqrt(D2) + tie * D2
    else:
        raise ValueError("kind must be 'energy' or 'length'")
    ia = int(np.argmin(np.sum((W - np.asarray(a)) ** 2, axis=1)))
    ib = int(np.argmin(np.sum((W - np.asarray(b)) ** 2, axis=1)))
    cost = C[ia].copy()
    back = []
    for _ in range(K - 1):
        tot = cost[:, None] + C
        arg = np.argmin(tot, axis=0)
        back.append(arg)
        cost = tot[arg, np.arange(len(W))]
    idx = [ib]
    for arg in reversed(back):
        idx.append(int(arg[idx[-1]]))
    idx.append(ia)
    return ToyPath(surface, W[idx[::-1]])


def toy_length_energy_shortcut(surface: EmbeddedSurface, a, b, Ks: Sequence[int] = (4, 8, 16),
                               n: int = 41) -> List[Dict]:
    """Largest step of the exhaustive length and energy minimizers for every ``K``."""
    gap = float(np.linalg.norm(surface.f(np.asarray(b, float)) - surface.f(np.asarray(a, float))))
    rows = []
    for K in Ks:
        e = grid_minimizer(surface, a, b, K, n, "energy")
        l = grid_minimizer(surface, a, b, K, n, "length")
        rows.append(dict(K=K, gap=gap,
                         energy_max_step=float(np.linalg.norm(e.steps, axis=1).max()),
                         length_max_step=float(np.linalg.norm(l.steps, axis=1).max()),
                         energy=e.energy(), length=l.length()))
    return rows


# ---------------------------------------------------------------------------
# transport

class ToySpace(LadderSpace):
    """Ladder operations for the spring energy: points are parameters,
    vectors are ambient displacements."""

    def __init__(self, surface: EmbeddedSurface):
        self.s = surface

    def exp1(self, x, v):
        return self.s.project(self.s.f(x) + v, guess=x)

    def log1(self, x, y):
        return self.s.f(y) - self.s.f(x)

    def midpoint(self, x, y):
        return self.s.project(0.5 * (self.s.f(x) + self.s.f(y)), guess=0.5 * (np.asarray(x) + y))

    def exp2(self, x, m):
        return toy_exp2(self.s, x, m)


def _tangent_angle(surface: EmbeddedSurface, w, v0, v1) -> float:
    n = surface.normal(w)
    t0 = v0 - (v0 @ n) * n
    t1 = v1 - (v1 @ n) * n
    return math.atan2(float(n @ np.cross(t0, t1)), float(t0 @ t1))


def toy_transport_holonomy(surface: EmbeddedSurface, triangle, steps: int = 32,
                           scale: float = 1e-3) -> float:
    """Rotation angle of a tangent vector carried around a geodesic triangle.

    Every edge is a discrete geodesic with ``steps`` steps; the vector
    (ambient length ``scale``) is moved by Schild's ladder.
    """
    A, B, C = (np.asarray(t, dtype=float) for t in triangle)
    pts = []
    for p, q in ((A, B), (B, C), (C, A)):
        edge = toy_discrete_geodesic(p, q, steps, surface).params
        pts.extend(edge[:-1] if not pts else edge[1:-1])
        pts.append(edge[-1])
    pts = [pts[0]] + [x for i, x in enumerate(pts[1:], 1) if not np.allclose(x, pts[i - 1])]
    J = surface.jac(A)
    v0 = J[:, 0] / np.linalg.norm(J[:, 0]) * scale
    v, _ = ladder_transport(ToySpace(surface), pts, v0)
    return _tangent_angle(surface, A, v0, v)


def write_table(path, rows: List[Dict]) -> None:
    if not rows:
        raise ValueError("empty table")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
