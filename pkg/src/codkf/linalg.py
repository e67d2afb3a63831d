"""Compiled dense kernels for the tiny symmetric matrices that dominate the run time.

numpy's LAPACK wrappers cost several microseconds per call on a 4 x 4 matrix,
mostly in dispatch; these loops run in a fraction of that.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_JACOBI_SWEEPS = 50


@njit(cache=True)
def cholesky_into(A, L):
    """Lower Cholesky factor of ``A`` written into ``L``; False if ``A`` is not PD."""
    n = A.shape[0]
    for j in range(n):
        s = A[j, j]
        for q in range(j):
            s -= L[j, q] * L[j, q]
        if not s > 0.0:
            return False
        d = math.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            s = A[i, j]
            for q in range(j):
                s -= L[i, q] * L[j, q]
            L[i, j] = s / d
        for i in range(j):
            L[i, j] = 0.0
    return True


@njit(cache=True)
def tri_inv_into(L, Li):
    """Inverse of a lower-triangular matrix."""
    n = L.shape[0]
    for j in range(n):
        Li[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, n):
            s = 0.0
            for q in range(j, i):
                s -= L[i, q] * Li[q, j]
            Li[i, j] = s / L[i, i]
        for i in range(j):
            Li[i, j] = 0.0


@njit(cache=True)
def gram_lower_into(Li, out):
    """``out = Li^T Li`` for lower-triangular ``Li`` (an SPD inverse from its factor)."""
    n = Li.shape[0]
    for i in range(n):
        for j in range(i + 1):
            s = 0.0
            for q in range(i, n):
                s += Li[q, i] * Li[q, j]
            out[i, j] = s
            out[j, i] = s


@njit(cache=True)
def spd_inv(A):
    """Inverse of a symmetric PD matrix (exactly symmetric); raises if not PD."""
    n = A.shape[0]
    L = np.zeros((n, n))
    if not cholesky_into(A, L):
        raise ValueError("matrix is not positive definite")
    Li = np.zeros((n, n))
    tri_inv_into(L, Li)
    out = np.empty((n, n))
    gram_lower_into(Li, out)
    return out


@njit(cache=True)
def chol_solve(L, b):
    """Solve ``L L^T x = b``."""
    n = L.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for q in range(i):
            s -= L[i, q] * y[q]
        y[i] = s / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for q in range(i + 1, n):
            s -= L[q, i] * x[q]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def _jacobi(A, want_vectors):
    n = A.shape[0]
    B = A.copy()
    V = np.eye(n) if want_vectors else np.empty((0, 0))
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale += B[i, j] * B[i, j]
    if scale == 0.0:
        return np.zeros(n), V
    for _ in range(_JACOBI_SWEEPS):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += B[i, j] * B[i, j]
        if off <= 1e-32 * scale:
            break
        for pp in range(n - 1):
            for q in range(pp + 1, n):
                apq = B[pp, q]
                if apq == 0.0:
                    continue
                theta = (B[q, q] - B[pp, pp]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for r in range(n):
                    brp = B[r, pp]
                    brq = B[r, q]
                    B[r, pp] = c * brp - s * brq
                    B[r, q] = s * brp + c * brq
                for r in range(n):
                    bpr = B[pp, r]
                    bqr = B[q, r]
                    B[pp, r] = c * bpr - s * bqr
                    B[q, r] = s * bpr + c * bqr
                if want_vectors:
                    for r in range(n):
                        vrp = V[r, pp]
                        vrq = V[r, q]
                        V[r, pp] = c * vrp - s * vrq
                        V[r, q] = s * vrp + c * vrq
    w = np.empty(n)
    for i in range(n):
        w[i] = B[i, i]
    if not want_vectors:
        return np.sort(w), V
    order = np.argsort(w)
    return w[order], V[:, order]


@njit(cache=True)
def sym_eigvalsh(A):
    """Ascending eigenvalues of a symmetric matrix (cyclic Jacobi)."""
    return _jacobi(A, False)[0]


@njit(cache=True)
def sym_eigh(A):
    """Ascending eigenvalues and orthonormal eigenvectors (columns) of a symmetric matrix."""
    return _jacobi(A, True)


@njit(cache=True)
def min_eigenvalues(S):
    """Smallest eigenvalue of each matrix in a (p, n, n) stack."""
    p = S.shape[0]
    out = np.empty(p)
    for j in range(p):
        out[j] = sym_eigvalsh(S[j])[0]
    return out


def spd_inverse(A: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric PD matrix; ``numpy.linalg.LinAlgError`` if it is not PD."""
    try:
        return spd_inv(np.ascontiguousarray(A, dtype=float))
    except ValueError as exc:
        raise np.linalg.LinAlgError(str(exc)) from None
