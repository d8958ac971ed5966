"""Hyperelastic density, its derivatives, and the viscous dissipation rate.

The density is the isotropic, rigid-motion invariant log-barrier energy

    W(A) = c * (mu/2 |A|^2 + lam/4 det(A)^2 - (mu + lam/2) log det A - mu - lam/4)

in two dimensions, with ``c = METRIC_SCALE``.  The scale is fixed so that
``1/2 D^2 W(I)(B, B) == dissipation_rate(B)`` holds exactly; without it the
Hessian at the identity reproduces only half of the dissipation.

Besides the single-matrix API there is a batched kernel,
:func:`pair_density`, which evaluates ``W(G A^-1) det A`` together with its
gradient and Hessian with respect to the eight entries of ``(A, G)``.  All
discrete path energies are assembled from it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

INF = math.inf
METRIC_SCALE = 2.0


class InvalidInputError(ValueError):
    pass


class SingularDeformationError(ValueError):
    pass


@dataclass(frozen=True)
class MaterialParams:
    """Material and regularization constants.

    ``delta2=None`` means "one mesh width" and is resolved by the caller
    that knows the mesh.
    """

    lam: float = 1.0
    mu: float = 1.0
    delta1: float = 0.01
    delta2: Optional[float] = None
    delta3: float = 0.01
    epsilon: float = 0.1

    def __post_init__(self):
        if not self.mu > 0:
            raise InvalidInputError("mu must be positive")
        if not self.lam >= 0:
            raise InvalidInputError("lam must be non-negative")
        if not 0 < self.delta1 < 1:
            raise InvalidInputError("delta1 must lie in (0, 1)")
        if self.delta2 is not None and not self.delta2 > 0:
            raise InvalidInputError("delta2 must be positive")
        if not self.delta3 >= 0:
            raise InvalidInputError("delta3 must be non-negative")
        if not self.epsilon > 0:
            raise InvalidInputError("epsilon must be positive")

    def filter_width(self, h: float) -> float:
        return h if self.delta2 is None else self.delta2


def _as_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.shape != (2, 2):
        raise InvalidInputError(f"expected a 2x2 matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("matrix has non-finite entries")
    return A


def _det(A):
    return A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]


def _cof(A):
    return np.array([[A[1, 1], -A[1, 0]], [-A[0, 1], A[0, 0]]])


def density_W(A, p: MaterialParams) -> float:
    A = _as_matrix(A)
    d = _det(A)
    if d <= 0:
        return INF
    val = (0.5 * p.mu * np.sum(A * A) + 0.25 * p.lam * d * d
           - (p.mu + 0.5 * p.lam) * math.log(d) - p.mu - 0.25 * p.lam)
    return METRIC_SCALE * float(val)


def density_dW(A, p: MaterialParams) -> np.ndarray:
    A = _as_matrix(A)
    d = _det(A)
    if d <= 0:
        raise SingularDeformationError("det A <= 0")
    cof = _cof(A)
    return METRIC_SCALE * (p.mu * A + 0.5 * p.lam * d * cof - (p.mu + 0.5 * p.lam) * cof / d)


def density_d2W(A, p: MaterialParams, B, C) -> float:
    """Second derivative ``D^2 W(A)(B, C)``."""
    A = _as_matrix(A)
    B = _as_matrix(B)
    C = _as_matrix(C)
    d = _det(A)
    if d <= 0:
        raise SingularDeformationError("det A <= 0")
    cof = _cof(A)
    Ainv = cof.T / d
    cb, cc = np.sum(cof * B), np.sum(cof * C)
    # second derivative of det in 2D
    d2det = B[0, 0] * C[1, 1] + B[1, 1] * C[0, 0] - B[0, 1] * C[1, 0] - B[1, 0] * C[0, 1]
    val = (p.mu * np.sum(B * C)
           + 0.5 * p.lam * (cb * cc + d * d2det)
           + (p.mu + 0.5 * p.lam) * np.trace(Ainv @ B @ Ainv @ C))
    return METRIC_SCALE * float(val)


def dissipation_rate(G, p: MaterialParams) -> float:
    G = _as_matrix(G)
    eps = 0.5 * (G + G.T)
    return float(p.lam * np.trace(eps) ** 2 + 2.0 * p.mu * np.sum(eps * eps))


# ---------------------------------------------------------------------------
# batched kernel for W(G A^-1) det A
#
# variables are ordered x = (A00, A01, A10, A11, G00, G01, G10, G11); every
# building block (det A, det G, P = G adj(A)) is a quadratic form 1/2 x^T Q x.

def _quadratic_forms():
    def sym(pairs):
        Q = np.zeros((8, 8))
        for i, j, c in pairs:
            Q[i, j] += c
            Q[j, i] += c
        return Q

    A00, A01, A10, A11, G00, G01, G10, G11 = range(8)
    Qa = sym([(A00, A11, 1.0), (A01, A10, -1.0)])
    Qg = sym([(G00, G11, 1.0), (G01, G10, -1.0)])
    QP = np.stack([
        sym([(G00, A11, 1.0), (G01, A10, -1.0)]),
        sym([(G00, A01, -1.0), (G01, A00, 1.0)]),
        sym([(G10, A11, 1.0), (G11, A10, -1.0)]),
        sym([(G10, A01, -1.0), (G11, A00, 1.0)]),
    ])
    return Qa, Qg, QP


_QA, _QG, _QP = _quadratic_forms()


def pair_density(A: np.ndarray, G: np.ndarray, p: MaterialParams, order: int = 2):
    """Evaluate ``f = W(G A^-1) det A`` for stacks of matrices.

    Parameters
    ----------
    A, G : arrays of shape (n, 2, 2)
    order : 0, 1 or 2; how many derivatives to return.

    Returns
    -------
    f : (n,) values, ``inf`` where det A <= 0 or det G <= 0
    grad : (n, 8) gradient, only if ``order >= 1``
    hess : (n, 8, 8) Hessian, only if ``order >= 2``

    Derivatives are only meaningful where ``f`` is finite.
    """
    n = A.shape[0]
    x = np.concatenate([A.reshape(n, 4), G.reshape(n, 4)], axis=1)
    a = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    g = G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] * G[:, 1, 0]
    ok = (a > 0) & (g > 0)
    a_s = np.where(ok, a, 1.0)
    g_s = np.where(ok, g, 1.0)

    adj = np.stack([A[:, 1, 1], -A[:, 0, 1], -A[:, 1, 0], A[:, 0, 0]], axis=1).reshape(n, 2, 2)
    P = np.einsum("nik,nkj->nij", G, adj).reshape(n, 4)
    s = np.sum(P * P, axis=1)

    k = METRIC_SCALE
    cs, cg = 0.5 * p.mu, 0.25 * p.lam
    c1, c2 = p.mu + 0.5 * p.lam, p.mu + 0.25 * p.lam
    logr = np.log(g_s) - np.log(a_s)
    f = k * (cs * s / a_s + cg * g_s ** 2 / a_s - c1 * a_s * logr - c2 * a_s)
    f = np.where(ok, f, INF)
    if order == 0:
        return f

    Fs = k * cs / a_s
    Fa = k * (-cs * s / a_s ** 2 - cg * g_s ** 2 / a_s ** 2 - c1 * logr + c1 - c2)
    Fg = k * (2 * cg * g_s / a_s - c1 * a_s / g_s)

    da = x @ _QA
    dg = x @ _QG
    dP = np.einsum("mrc,nc->nmr", _QP, x)  # (n, 4, 8)
    ds = 2.0 * np.einsum("nm,nmr->nr", P, dP)
    grad = Fs[:, None] * ds + Fa[:, None] * da + Fg[:, None] * dg
    if order == 1:
        return f, grad

    Fsa = -k * cs / a_s ** 2
    Faa = k * (2 * cs * s / a_s ** 3 + 2 * cg * g_s ** 2 / a_s ** 3 + c1 / a_s)
    Fag = k * (-2 * cg * g_s / a_s ** 2 - c1 / g_s)
    Fgg = k * (2 * cg / a_s + c1 * a_s / g_s ** 2)

    d2s = 2.0 * (np.einsum("nmr,nmc->nrc", dP, dP) + np.einsum("nm,mrc->nrc", P, _QP))
    outer = lambda u, v: u[:, :, None] * v[:, None, :]
    hess = (Fs[:, None, None] * d2s
            + Fa[:, None, None] * _QA + Fg[:, None, None] * _QG
            + Fsa[:, None, None] * (outer(ds, da) + outer(da, ds))
            + Faa[:, None, None] * outer(da, da)
            + Fag[:, None, None] * (outer(da, dg) + outer(dg, da))
            + Fgg[:, None, None] * outer(dg, dg))
    return f, grad, hess
