"""Newton-type solvers shared by the path, exponential and toy modules."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Raised when an iteration fails; carries the last iterate."""

    def __init__(self, message, iterate=None, history=None):
        super().__init__(message)
        self.iterate = iterate
        self.history = history if history is not None else []


@dataclass
class TRResult:
    x: np.ndarray
    f: float
    gnorm: float
    iterations: int
    converged: bool
    stopped: bool = False          # callback asked to stop (e.g. reference reset)
    history: list = field(default_factory=list)


def steihaug_cg(H, g, radius: float, tol: float = 1e-8, max_iter: Optional[int] = None,
                precond: Optional[np.ndarray] = None):
    """Truncated CG for ``min g.s + 1/2 s.H.s`` subject to ``|s|_2 <= radius``.

    ``precond`` is an optional positive diagonal; the trust region is then
    measured in the matching scaled norm.
    """
    n = g.shape[0]
    max_iter = max_iter or 2 * n
    Minv = np.ones(n) if precond is None else 1.0 / precond
    matvec = (lambda v: H @ v)
    s = np.zeros(n)
    r = g.copy()
    z = Minv * r
    d = -z
    rz = r @ z
    g0 = math.sqrt(max(rz, 0.0))
    if g0 == 0.0:
        return s

    def to_boundary(s, d):
        Md = d / Minv
        a = d @ Md
        b = 2 * (s @ Md)
        c = s @ (s / Minv) - radius ** 2
        tau = (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
        return s + tau * d

    for _ in range(max_iter):
        Hd = matvec(d)
        curv = d @ Hd
        if curv <= 0:
            return to_boundary(s, d)
        alpha = rz / curv
        s_new = s + alpha * d
        if math.sqrt(s_new @ (s_new / Minv)) >= radius:
            return to_boundary(s, d)
        s = s_new
        r = r + alpha * Hd
        z = Minv * r
        rz_new = r @ z
        if math.sqrt(max(rz_new, 0.0)) <= tol * g0:
            return s
        d = -z + (rz_new / rz) * d
        rz = rz_new
    return s


def block_tridiag_solve(diag, upper, rhs, return_pivots: bool = False):
    """Solve a symmetric block-tridiagonal system by a block LDL^T sweep.

    ``diag[k]`` is block ``(k, k)``, ``upper[k]`` is block ``(k, k + 1)``.
    With ``return_pivots`` the Schur complements are returned too; their
    inertia equals the inertia of the full matrix.
    """
    K = len(diag)
    S = [np.asarray(diag[0], dtype=float)]
    L = [None]
    y = [np.asarray(rhs[0], dtype=float)]
    for k in range(1, K):
        Bt = np.asarray(upper[k - 1], dtype=float).T
        Lk = np.linalg.solve(S[k - 1].T, Bt.T).T       # B^T S^-1
        L.append(Lk)
        S.append(np.asarray(diag[k], dtype=float) - Lk @ np.asarray(upper[k - 1], dtype=float))
        y.append(np.asarray(rhs[k], dtype=float) - Lk @ y[k - 1])
    x = [None] * K
    x[K - 1] = np.linalg.solve(S[K - 1], y[K - 1])
    for k in range(K - 2, -1, -1):
        x[k] = np.linalg.solve(S[k], y[k] - np.asarray(upper[k], dtype=float) @ x[k + 1])
    return (x, S) if return_pivots else x


@dataclass
class TRConfig:
    max_iter: int = 200
    gtol_abs: float = 1e-10
    gtol_rel: float = 1e-6
    delta0: float = 0.02
    delta_max: float = 0.25
    eta: float = 1e-4


class NotPositiveDefinite(ArithmeticError):
    pass


try:  # CHOLMOD through cvxopt; SuperLU is the fallback
    import cvxopt
    import cvxopt.cholmod as _cholmod
except ImportError:  # pragma: no cover - exercised only without cvxopt
    cvxopt = None


def cholesky_solver(M):
    """Factor a symmetric positive definite sparse matrix.

    Returns a function solving ``M x = b`` for vectors or column stacks.
    Raises :class:`NotPositiveDefinite` when the factorization breaks down.
    """
    M = sp.csc_matrix(M)
    n = M.shape[0]
    if cvxopt is not None:
        L = sp.tril(M, format="coo")
        A = cvxopt.spmatrix(cvxopt.matrix(L.data.astype(float)), cvxopt.matrix(L.row.astype(np.int64)),
                            cvxopt.matrix(L.col.astype(np.int64)), size=(n, n))
        try:
            F = _cholmod.symbolic(A, uplo="L")
            _cholmod.numeric(A, F)
        except ArithmeticError as exc:
            raise NotPositiveDefinite(str(exc)) from None

        def solve(b):
            b = np.asarray(b, dtype=float)
            B = cvxopt.matrix(b.reshape(n, -1))
            _cholmod.solve(F, B)
            return np.array(B).reshape(b.shape)

        return solve
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                           options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise NotPositiveDefinite(str(exc)) from None
    d = lu.U.diagonal()
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise NotPositiveDefinite("non-positive pivot")
    return lu.solve


class ShiftedNewton:
    """Newton steps on ``H + sigma I`` with the smallest shift making it
    positive definite (tried in geometric increments).  The last shift is
    remembered to warm-start the next step."""

    def __init__(self):
        self.sigma = 0.0

    def __call__(self, H, g):
        H = sp.csc_matrix(H)
        diag = np.abs(H.diagonal())
        scale = max(float(diag.max()) if diag.size else 1.0, 1e-300)
        floor = 1e-10 * scale
        sigma = 0.0 if self.sigma <= floor else self.sigma / 10.0
        eye = sp.identity(H.shape[0], format="csc")
        for _ in range(40):
            try:
                solve = cholesky_solver(H if sigma == 0.0 else H + sigma * eye)
            except NotPositiveDefinite:
                sigma = floor if sigma == 0.0 else 4.0 * sigma
                continue
            self.sigma = sigma
            s = solve(-g)
            if np.all(np.isfinite(s)):
                return s
            sigma = floor if sigma == 0.0 else 4.0 * sigma
        return None


def _unpack(out):
    return (out[0], out[1], out[2]) if len(out) == 3 else (out[0], out[1], None)


def trust_region_newton(fun: Callable, grad_hess: Callable, x0: np.ndarray, cfg: TRConfig,
                        callback: Optional[Callable] = None, gnorm_ref: Optional[float] = None) -> TRResult:
    """Newton trust-region minimization with an infinity-norm trust region.

    ``fun(x)`` may return ``inf`` (rejected step).  Steps solve the shifted
    Newton system by sparse Cholesky and are truncated to the trust
    radius; if no shift can be factored a Steihaug-CG step is used instead.
    ``callback(it, x, info)`` is called after each accepted step and may
    return ``True`` to stop early.  ``grad_hess`` may return a third item,
    ``None`` (kept for interface symmetry with constrained callers).
    """
    x = np.array(x0, dtype=float)
    f = fun(x)
    if not np.isfinite(f):
        raise SolverError("initial iterate has infinite energy", iterate=x)
    g, H, C = _unpack(grad_hess(x))
    gnorm = float(np.linalg.norm(g))
    ref = gnorm if gnorm_ref is None else gnorm_ref
    tol = max(cfg.gtol_abs, cfg.gtol_rel * ref)
    delta = cfg.delta0
    stepper = ShiftedNewton()
    history = []
    it = 0
    stalls = 0
    while it < cfg.max_iter:
        if gnorm <= tol:
            return TRResult(x, f, gnorm, it, True, history=history)
        it += 1
        s = stepper(H, g)
        if s is None:
            d = np.sqrt(np.abs(sp.csr_matrix(H).diagonal())) + 1e-12
            s = steihaug_cg(sp.csr_matrix(H), g, radius=delta * math.sqrt(g.size), precond=d * d)
        snorm = float(np.abs(s).max())
        if snorm > delta:
            s = s * (delta / snorm)
            snorm = delta
        pred = -(g @ s + 0.5 * s @ (H @ s))
        x_new = x + s
        f_new = fun(x_new)
        rho = (f - f_new) / pred if (pred > 0 and np.isfinite(f_new)) else -np.inf
        new = None
        noise = 100 * np.finfo(float).eps * abs(f)
        if 0 < pred <= noise and np.isfinite(f_new) and f_new <= f + noise:
            # below the resolution of f the ratio is noise: judge the step by the gradient
            new = _unpack(grad_hess(x_new))
            rho = 1.0 if np.linalg.norm(new[0]) < gnorm else -np.inf
        accepted = bool(rho > cfg.eta)
        history.append(dict(iter=it, f=f_new if accepted else f, gnorm=gnorm,
                            delta=delta, step=snorm, rho=rho, accepted=accepted))
        if rho < 0.25:
            delta = 0.25 * snorm
        elif rho > 0.75 and snorm >= 0.99 * delta:
            delta = min(2.0 * delta, cfg.delta_max)
        if accepted:
            stalls = 0 if (f - f_new > 1e-15 * max(abs(f), 1.0) or new is not None) else stalls + 1
            x, f = x_new, f_new
            g, H, C = new if new is not None else _unpack(grad_hess(x))
            gnorm = float(np.linalg.norm(g))
            if callback is not None and callback(it, x, dict(f=f, gnorm=gnorm, delta=delta)):
                return TRResult(x, f, gnorm, it, gnorm <= tol, stopped=True, history=history)
            if stalls >= 5:
                break
        elif delta < 1e-14:
            break
    return TRResult(x, f, gnorm, it, gnorm <= tol, history=history)


def newton_bordered(residual_jacobian: Callable, x0: np.ndarray, C: sp.spmatrix, c0: np.ndarray,
                    tol: float, max_iter: int = 50, merit: Optional[Callable] = None,
                    min_step: float = 1e-6):
    """Damped Newton for ``R(x) = 0`` subject to the linear constraints ``C x = c0``.

    The constraints are imposed through Lagrange multipliers in the bordered
    system ``[[J, C^T], [C, 0]]``.  ``merit(x)`` (default ``|R|``) drives the
    backtracking; infinite merit values are rejected.
    """
    x = np.array(x0, dtype=float)
    R, J = residual_jacobian(x)
    rnorm = float(np.linalg.norm(R))
    history = [rnorm]
    if J is None or not np.isfinite(rnorm):
        raise SolverError("Newton started at an inadmissible point", iterate=x, history=history)
    m = C.shape[0]
    for _ in range(max_iter):
        if rnorm <= tol and np.linalg.norm(C @ x - c0) <= 1e-12 * max(1.0, np.abs(x).max()):
            return x, history
        KKT = sp.bmat([[J, C.T], [C, None]], format="csc")
        rhs = np.concatenate([-R, c0 - C @ x])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                sol = spla.splu(KKT).solve(rhs)
            except RuntimeError as exc:
                raise SolverError(f"singular Newton system: {exc}", iterate=x, history=history)
        dx = sol[:-m] if m else sol
        t = 1.0
        while True:
            x_try = x + t * dx
            R_try, J_try = residual_jacobian(x_try)
            val = float(np.linalg.norm(R_try)) if merit is None else merit(x_try, R_try)
            cur = rnorm if merit is None else merit(x, R)
            if np.isfinite(val) and np.all(np.isfinite(R_try)) and val < (1 - 1e-4 * t) * cur + 1e-300:
                break
            t *= 0.5
            if t < min_step:
                raise SolverError("Newton line search failed", iterate=x, history=history)
        x, R, J = x_try, R_try, J_try
        rnorm = float(np.linalg.norm(R))
        history.append(rnorm)
    if rnorm <= tol:
        return x, history
    raise SolverError(f"Newton did not converge (|R| = {rnorm:.3e})", iterate=x, history=history)
