"""Log-barrier solvers for the two fixed-shape SDPs behind the fusion step.

Both problems are tiny (n x n blocks with n ~ 4, a handful of scalar weights),
so a barrier method with Newton centering and an exact line search is enough.
The inner loop is compiled with numba; one fusion instance costs well under a
millisecond, which is what makes Monte Carlo batches over 20-node networks
practical.

Problems solved for information matrices ``S_1..S_p``:

* ``max_trace_fusion``: maximise ``Tr(S)`` s.t. ``0 < S <= sum_j lam_j S_j``,
  ``sum_j lam_j <= 1``, ``lam >= 0``.
* ``trace_relaxation``: maximise ``Tr(X)`` s.t. ``Tr(X S_j) <= 1``, ``X >= 0``,
  solved through its dual ``min 1'mu`` s.t. ``sum_j mu_j S_j >= I``, ``mu >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from functools import lru_cache

import numpy as np
from numba import njit

from .linalg import chol_solve, cholesky_into, gram_lower_into, min_eigenvalues, spd_inv, sym_eigh, sym_eigvalsh, tri_inv_into

# Newton decrement^2 regarded as centred.  Round-off floors the decrement
# around 1e-8 once t ~ 1e10, so this cannot be much tighter.
CENTERED = 1e-6
_LINE_SEARCH_ITERS = 12
RIDGE = 1e-12
GAP_ACCEPT = 1e-6  # relative primal-dual gap accepted when centering stalls

_OK = 0
_MAX_ITER = 1
_NOT_PD = 2


class SolverError(RuntimeError):
    """Raised when the barrier iterations fail."""

    def __init__(self, status: str, message: str = ""):
        super().__init__(f"{status}: {message}" if message else status)
        self.status = status


@dataclass(frozen=True)
class BarrierOptions:
    gap_tol: float = 1e-9  # duality gap bound nu/t, in normalised units
    t0: float = 10.0
    mu: float = 100.0
    max_newton: int = 300


@lru_cache(maxsize=None)
def sym_basis(n: int) -> np.ndarray:
    """Orthonormal basis of the symmetric n x n matrices, shape (n(n+1)/2, n, n)."""
    basis = []
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            if i == j:
                E[i, i] = 1.0
            else:
                E[i, j] = E[j, i] = 1.0 / np.sqrt(2.0)
            basis.append(E)
    out = np.array(basis)
    out.setflags(write=False)
    return out


@njit(cache=True)
def _affine(F0, D, v):
    n = F0.shape[0]
    Z = F0.copy()
    for k in range(D.shape[0]):
        vk = v[k]
        if vk != 0.0:
            for i in range(n):
                for j in range(n):
                    Z[i, j] += vk * D[k, i, j]
    return Z


@njit(cache=True)
def _logdet_terms(Zinv, D, grad, H):
    """Accumulate gradient and Hessian of ``-log det Z`` with ``dZ/dv_a = D[a]``."""
    k, n, _ = D.shape
    T = np.zeros((k, n, n))  # Z^-1 D_a
    Tt = np.empty((k, n, n))  # its transpose, for contiguous inner products
    for a in range(k):
        for i in range(n):
            for q in range(n):
                z = Zinv[i, q]
                if z != 0.0:
                    for j in range(n):
                        T[a, i, j] += z * D[a, q, j]
        tr = 0.0
        for i in range(n):
            tr += T[a, i, i]
            for j in range(n):
                Tt[a, j, i] = T[a, i, j]
        grad[a] -= tr
    # H_ae = Tr(Z^-1 D_a Z^-1 D_e)
    for a in range(k):
        for e in range(a, k):
            acc = 0.0
            for i in range(n):
                for j in range(n):
                    acc += T[a, i, j] * Tt[e, i, j]
            H[a, e] += acc
            if e != a:
                H[e, a] += acc


@njit(cache=True)
def _line_search(slope, gam):
    """Minimise ``slope*s - sum_i log(1 + s*gam_i)`` over the step ``s``.

    ``gam`` holds the generalised eigenvalues of every barrier block along the
    search direction, so the barrier restricted to the line is exact.
    """
    s_max = np.inf
    for g in gam:
        if g < 0.0:
            s_max = min(s_max, -1.0 / g)
    lo = 0.0
    hi = 0.99 * s_max if np.isfinite(s_max) else 2.0
    s = min(1.0, 0.5 * hi)
    for _ in range(_LINE_SEARCH_ITERS):
        d1 = slope
        d2 = 0.0
        for g in gam:
            q = 1.0 + s * g
            d1 -= g / q
            d2 += (g / q) ** 2
        if d1 < 0.0:
            lo = s
        else:
            hi = s
        trial = s - d1 / max(d2, 1e-300)
        s = trial if lo < trial < hi else 0.5 * (lo + hi)
    return s


@njit(cache=True)
def _barrier_core(c, F0s, Ds, G, f, v0, t0, mu, gap_tol, centered, max_newton):
    """Minimise ``c'v`` s.t. ``F0s[b] + sum_k v_k Ds[b, k] > 0`` and ``f + G v > 0``.

    Returns ``(v, t, iterations, status, dv)``; ``dv`` is the last centering
    Newton direction, from which callers can form second-order accurate duals.
    """
    nb, k, n, _ = Ds.shape
    m = G.shape[0]
    nu = nb * n + m
    v = v0.copy()
    t = t0
    Ls = np.zeros((nb, n, n))
    Lis = np.zeros((nb, n, n))
    Zinv = np.empty((n, n))
    Hs = np.empty((k, k))
    LH = np.zeros((k, k))
    dsc = np.empty(k)
    gam = np.empty(m + nb * n)
    M = np.empty((n, n))
    dv = np.zeros(k)
    for it in range(max_newton):
        grad = np.zeros(k)
        H = np.zeros((k, k))
        for b in range(nb):
            Z = _affine(F0s[b], Ds[b], v)
            if not cholesky_into(Z, Ls[b]):
                return v, t, it, _NOT_PD, np.zeros(k)
            tri_inv_into(Ls[b], Lis[b])
            gram_lower_into(Lis[b], Zinv)
            _logdet_terms(Zinv, Ds[b], grad, H)
        s_lin = f.copy()
        for r in range(m):
            for a in range(k):
                s_lin[r] += G[r, a] * v[a]
            if s_lin[r] <= 0.0:
                return v, t, it, _NOT_PD, np.zeros(k)
        inv_s = 1.0 / s_lin
        for r in range(m):
            for a in range(k):
                if G[r, a] == 0.0:
                    continue
                grad[a] -= G[r, a] * inv_s[r]
                for e in range(k):
                    H[a, e] += G[r, a] * G[r, e] * inv_s[r] ** 2

        # Jacobi scaling: barrier Hessians blow up along coordinates that
        # approach the boundary, which is harmless once the diagonal is normalised.
        for a in range(k):
            dsc[a] = math.sqrt(abs(H[a, a])) if H[a, a] != 0.0 else 1.0
        for a in range(k):
            for e in range(k):
                Hs[a, e] = H[a, e] / (dsc[a] * dsc[e])
            # duplicate constraints leave a flat, cost-free direction; a small
            # ridge on the unit diagonal keeps the system solvable
            Hs[a, a] += RIDGE
        if not cholesky_into(Hs, LH):
            return v, t, it, _NOT_PD, np.zeros(k)
        g = t * c + grad
        dv = chol_solve(LH, -g / dsc) / dsc
        dec2 = -np.dot(g, dv)
        if dec2 < centered:
            if nu / t <= gap_tol:
                return v, t, it, _OK, dv
            t *= mu
            g = t * c + grad
            dv = chol_solve(LH, -g / dsc) / dsc

        for r in range(m):
            acc = 0.0
            for a in range(k):
                acc += G[r, a] * dv[a]
            gam[r] = acc * inv_s[r]
        for b in range(nb):
            dZ = _affine(np.zeros((n, n)), Ds[b], dv)
            Li = Lis[b]
            for i in range(n):
                for j in range(i + 1):
                    acc = 0.0
                    for l in range(i + 1):
                        for q in range(j + 1):
                            acc += Li[i, l] * dZ[l, q] * Li[j, q]
                    M[i, j] = acc
                    M[j, i] = acc
            gam[m + b * n : m + (b + 1) * n] = sym_eigvalsh(M)
        step = _line_search(t * np.dot(c, dv), gam)
        v = v + step * dv
    return v, t, max_newton, _MAX_ITER, dv


@njit(cache=True)
def _fusion_problem(Sh, E):
    """Weights live on the simplex, ``lam_p = 1 - sum_{j<p} lam_j``.

    The bound ``sum lam <= 1`` is always tight at the optimum (the trace is
    monotone), and keeping it as an inequality makes its slack cancel
    catastrophically when the optimum sits inside a face of the simplex.
    """
    p, n, _ = Sh.shape
    d = E.shape[0]
    k = d + p - 1
    c = np.zeros(k)
    F0s = np.zeros((2, n, n))
    F0s[1] = Sh[p - 1]
    Ds = np.zeros((2, k, n, n))
    for a in range(d):
        c[a] = np.trace(E[a])
        Ds[0, a] = E[a]  # slack block W
        Ds[1, a] = -E[a]  # fused block sum lam S - W
    for j in range(p - 1):
        c[d + j] = -np.trace(Sh[j]) + np.trace(Sh[p - 1])
        Ds[1, d + j] = Sh[j] - Sh[p - 1]
    G = np.zeros((p, k))
    f = np.zeros(p)
    for j in range(p - 1):
        G[j, d + j] = 1.0
        G[p - 1, d + j] = -1.0
    f[p - 1] = 1.0
    v0 = np.zeros(k)
    W0 = Sh.sum(axis=0) / (2.0 * p)  # lam = 1/p leaves S = W0 > 0 as well
    for a in range(d):
        v0[a] = np.sum(E[a] * W0)
    v0[d:] = 1.0 / p
    return c, F0s, Ds, G, f, v0


def _check_status(status: int, what: str) -> None:
    if status == _MAX_ITER:
        raise SolverError("max_iterations", what)
    if status == _NOT_PD:
        raise SolverError("infeasible", what)


@njit(cache=True)
def _solve_fusion(S, E, t0, mu, gap_tol, centered, max_newton):
    p, n, _ = S.shape
    d = E.shape[0]
    tmax = 0.0
    for j in range(p):
        tmax = max(tmax, np.trace(S[j]))
    scale = n / tmax
    c, F0s, Ds, G, f, v0 = _fusion_problem(S * scale, E)
    v, _, iters, status, _ = _barrier_core(c, F0s, Ds, G, f, v0, t0, mu, gap_tol, centered, max_newton)
    lam = np.empty(p)
    lam[: p - 1] = v[d:]
    lam[p - 1] = 1.0 - v[d:].sum()
    S_star = _affine(F0s[1], Ds[1], v) / scale
    return 0.5 * (S_star + S_star.T), lam, iters, status


@njit(cache=True)
def _solve_relaxation(S, t0, mu, gap_tol, centered, max_newton):
    p, n, _ = S.shape
    # normalise so the best single-constraint optimum has Tr(X) = 1
    scale = 1.0 / min_eigenvalues(S).max()
    Sh = S * scale
    F0s = np.empty((1, n, n))
    F0s[0] = -np.eye(n)
    Ds = np.empty((1, p, n, n))
    Ds[0] = Sh
    mu0 = 2.0 / sym_eigvalsh(Sh.sum(axis=0))[0]
    v, t, iters, status, dv = _barrier_core(
        np.ones(p), F0s, Ds, np.eye(p), np.zeros(p), np.full(p, mu0), t0, mu, gap_tol, centered, max_newton
    )
    if status == _NOT_PD:
        return np.zeros((n, n)), v, iters, status
    # X = Z^-1 / t is exact only on the central path; the Newton-corrected
    # estimate is off by O(decrement^2) instead of O(decrement)
    Zi = spd_inv(_affine(F0s[0], Sh, v))
    dZ = _affine(np.zeros((n, n)), Sh, dv)
    Xh = (Zi - Zi @ dZ @ Zi) / t
    Xh = 0.5 * (Xh + Xh.T)
    if status == _MAX_ITER and _relaxation_gap(Xh, Sh, v) <= GAP_ACCEPT:
        # near-duplicate constraints leave the dual drifting along a flat face
        # after the value has converged; the explicit gap is the real test
        status = _OK
    # Tr(X S_j) = Tr(Xh Sh_j) gives X = scale * Xh
    return Xh * scale, v, iters, status


@njit(cache=True)
def _relaxation_gap(Xh, Sh, v):
    """Relative gap between the dual value and a feasible rescaling of ``Xh``."""
    w, V = sym_eigh(Xh)
    n = Xh.shape[0]
    X = np.zeros((n, n))
    for q in range(n):
        if w[q] > 0.0:
            for i in range(n):
                for j in range(n):
                    X[i, j] += w[q] * V[i, q] * V[j, q]
    worst = 0.0
    for b in range(Sh.shape[0]):
        worst = max(worst, np.sum(X * Sh[b]))
    if worst <= 0.0:
        return np.inf
    dual = v.sum()
    return abs(dual - np.trace(X) / worst) / dual


def max_trace_fusion(
    S: np.ndarray, opts: BarrierOptions | None = None
) -> tuple[np.ndarray, np.ndarray, int]:
    """Solve the weighted-intersection trace maximisation.

    Args:
        S: information matrices, shape (p, n, n), each symmetric PD.

    Returns:
        ``(S_star, lam, iterations)``.

    The iterate is parametrised by the slack ``W = sum_j lam_j S_j - S`` rather
    than by ``S`` itself; ``W`` shrinks to zero at the optimum, and keeping it as
    a coordinate leaves the Newton systems well scaled.
    """
    opts = opts or BarrierOptions()
    S = np.ascontiguousarray(S, dtype=float)
    S_star, lam, iters, status = _solve_fusion(
        S, sym_basis(S.shape[1]), opts.t0, opts.mu, opts.gap_tol, CENTERED, opts.max_newton
    )
    _check_status(status, "outer ellipsoid fusion")
    return S_star, lam, int(iters)


def trace_relaxation(
    S: np.ndarray, opts: BarrierOptions | None = None
) -> tuple[np.ndarray, np.ndarray, int]:
    """Solve ``max Tr(X)`` s.t. ``Tr(X S_j) <= 1``, ``X >= 0``.

    The barrier runs on the p-dimensional dual; at a central point
    ``X = Z^{-1}/t`` with ``Z = sum_j mu_j S_j - I`` is primal feasible.  Off
    the exact centre the recovered X can overshoot the constraints slightly
    or carry tiny negative eigenvalues, so callers should polish it (see
    ``codkf.fusion``).

    Returns:
        ``(X, mu, iterations)``; ``mu`` is the dual for the scaled data.
    """
    opts = opts or BarrierOptions()
    S = np.ascontiguousarray(S, dtype=float)
    X, v, iters, status = _solve_relaxation(S, opts.t0, opts.mu, opts.gap_tol, CENTERED, opts.max_newton)
    _check_status(status, "trace relaxation")
    return X, v, int(iters)
