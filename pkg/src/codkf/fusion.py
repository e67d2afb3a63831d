"""Fusion of neighbouring predictions under unknown correlations, with a certificate.

``solve_outer_lj`` picks the information matrix of largest trace that bounds
the intersection of the neighbours' ellipsoids; ``solve_trace_relaxation``
solves the convex relaxation of the rank-one problem whose optimum that bound
should attain; ``certify`` compares the two.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from . import linalg as la
from . import sdp

log = logging.getLogger(__name__)

EPS_PD = 1e-12
EPS_FEAS = 1e-6
RHO_ANOMALY = 1e-6
TOL_RANK = 1e-6
TOL_RHO = 1e-3

BACKENDS = ("barrier", "cvxpy")


class NotPositiveDefiniteError(ValueError):
    """An information matrix handed to the fusion step is not positive definite."""


class FusionError(RuntimeError):
    """The SDP backend failed; ``status`` carries the solver's reason."""

    def __init__(self, status: str, message: str = ""):
        super().__init__(f"{status}: {message}" if message else status)
        self.status = status


@dataclass
class InfoEllipsoid:
    """Prediction in information form: ``S = P^-1``, ``s = P^-1 x``."""

    S: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        s = np.asarray(self.s, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError(f"S must be square, got shape {S.shape}")
        if s.shape != (S.shape[0],):
            raise ValueError(f"s must have length {S.shape[0]}, got shape {s.shape}")
        S = np.ascontiguousarray(0.5 * (S + S.T))
        lmin = la.sym_eigvalsh(S)[0]
        if not lmin > EPS_PD:
            raise NotPositiveDefiniteError(f"information matrix has min eigenvalue {lmin:.3e}")
        self.S = S
        self.s = s

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def x(self) -> np.ndarray:
        return np.linalg.solve(self.S, self.s)

    @classmethod
    def from_estimate(cls, x: np.ndarray, P: np.ndarray) -> InfoEllipsoid:
        S = np.linalg.inv(P)
        return cls(S, S @ np.asarray(x, dtype=float))


@dataclass
class FusionResult:
    S_star: np.ndarray
    P_star: np.ndarray
    lam: np.ndarray
    x_star: np.ndarray
    objective: float
    iterations: int = 0


@dataclass
class CertificateSolution:
    X_star: np.ndarray
    trace_X: float
    rank_X: int
    iterations: int = 0


@dataclass
class CertificationRecord:
    rank: int
    rho: float  # clamped to [0, 1] for reporting
    rho_raw: float
    certified: bool
    anomaly: bool = False
    failure: str | None = None

    @classmethod
    def failed(cls, reason: str) -> CertificationRecord:
        return cls(rank=0, rho=float("nan"), rho_raw=float("nan"), certified=False, failure=reason)


@dataclass
class FusionOutcome:
    """Everything one node computes when fusing its inbox."""

    fusion: FusionResult
    certificate: CertificateSolution | None
    record: CertificationRecord
    fallback: bool = False
    extra: dict = field(default_factory=dict)


def _stack(ellipsoids: Sequence[InfoEllipsoid]) -> np.ndarray:
    if not ellipsoids:
        raise ValueError("at least one ellipsoid is required")
    n = ellipsoids[0].n
    if any(e.n != n for e in ellipsoids):
        raise ValueError("ellipsoids must share one dimension")
    return np.array([e.S for e in ellipsoids])


def numerical_rank(X: np.ndarray, tol_rank: float = TOL_RANK) -> int:
    w = la.sym_eigvalsh(np.ascontiguousarray(X))
    if w[-1] <= 0:
        return 0
    return int((w > tol_rank * w[-1]).sum())


def _result(ellipsoids, S_star, lam, iterations=0) -> FusionResult:
    P_star = la.spd_inverse(S_star)
    s_mix = np.einsum("j,jk->k", lam, np.array([e.s for e in ellipsoids]))
    return FusionResult(S_star, P_star, np.asarray(lam, dtype=float), P_star @ s_mix, float(np.trace(S_star)), iterations)


def solve_outer_lj(
    ellipsoids: Sequence[InfoEllipsoid],
    backend: str = "barrier",
    opts: sdp.BarrierOptions | None = None,
) -> FusionResult:
    """Largest-trace information matrix ``S <= sum_j lam_j S_j`` with ``lam`` in the simplex.

    Raises ``FusionError`` when the backend fails.
    """
    S = _stack(ellipsoids)
    if len(ellipsoids) == 1:
        return _result(ellipsoids, S[0].copy(), np.ones(1))
    if backend == "barrier":
        try:
            S_star, lam, iters = sdp.max_trace_fusion(S, opts)
        except sdp.SolverError as exc:
            raise FusionError(exc.status, str(exc)) from exc
        except np.linalg.LinAlgError as exc:
            raise FusionError("numerical_error", str(exc)) from exc
    elif backend == "cvxpy":
        S_star, lam = _cvxpy_outer_lj(S)
        iters = 0
    else:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    if la.sym_eigvalsh(S_star)[0] <= 0:
        raise FusionError("infeasible", "fused information matrix is not positive definite")
    return _result(ellipsoids, S_star, lam, iters)


def _reduce_rank(X: np.ndarray, S: np.ndarray, tol_rank: float) -> np.ndarray:
    """Move ``X`` along its optimal face to an extreme point of lower rank.

    Directions ``R W R^T`` (``X = R R^T``) that keep the objective and every
    active constraint fixed stay optimal; stepping until an eigenvalue of
    ``I + a W`` hits zero drops the rank by one.  Inactive constraints are
    respected by a ratio test and join the active set when they bind.
    """
    n = X.shape[0]
    for _ in range(2 * n):
        w, V = np.linalg.eigh(X)
        keep = w > tol_rank * w[-1]
        r = int(keep.sum())
        if r <= 1:
            break
        R = V[:, keep] * np.sqrt(w[keep])
        vals = np.einsum("ij,pji->p", X, S)
        active = vals >= 1.0 - 1e-7
        iu = np.triu_indices(r)
        mats = [R.T @ Sj @ R for Sj in S[active]] + [R.T @ R]
        # Tr(W M) in terms of the upper-triangular entries of symmetric W
        rows = []
        for M in mats:
            coef = 2.0 * M
            coef[np.diag_indices(r)] = np.diag(M)
            rows.append(coef[iu])
        A = np.array(rows)
        _, sv, Vt = np.linalg.svd(A)
        rank_A = int((sv > 1e-10 * max(sv[0], 1.0)).sum())
        if rank_A >= len(iu[0]):
            break
        Wu = Vt[-1]
        W = np.zeros((r, r))
        W[iu] = Wu
        W = W + W.T - np.diag(np.diag(W))
        ew = np.linalg.eigvalsh(W)
        if ew[0] >= 0:  # flip so W has a negative eigenvalue to step onto
            W, ew = -W, -ew[::-1]
        step = -1.0 / ew[0]
        dvals = np.einsum("ij,pji->p", R @ W @ R.T, S)
        for j in np.flatnonzero(~active & (dvals > 0)):
            step = min(step, (1.0 - vals[j]) / dvals[j])
        X = R @ (np.eye(r) + step * W) @ R.T
        X = 0.5 * (X + X.T)
    return X


@njit(cache=True)
def _truncate(X, S, tol_rank):
    """Drop numerically null eigen-directions and rescale onto the feasible set.

    Returns the cleaned X and its rank; rank one comes back as the exact
    optimum ``v v^T / max_j v^T S_j v`` along its direction.
    """
    n = X.shape[0]
    w, V = la.sym_eigh(X)
    top = w[n - 1]
    out = np.zeros((n, n))
    rank = 0
    for i in range(n):
        if w[i] > tol_rank * top:
            rank += 1
            for a in range(n):
                for b in range(n):
                    out[a, b] += w[i] * V[a, i] * V[b, i]
    if rank == 1:
        v = V[:, n - 1].copy()
        worst = 0.0
        for j in range(S.shape[0]):
            q = 0.0
            for a in range(n):
                for b in range(n):
                    q += v[a] * S[j, a, b] * v[b]
            worst = max(worst, q)
        for a in range(n):
            for b in range(n):
                out[a, b] = v[a] * v[b] / worst
        return out, rank
    worst = 1.0
    for j in range(S.shape[0]):
        worst = max(worst, np.sum(out * S[j]))
    return out / worst, rank


def _polish(X: np.ndarray, S: np.ndarray, tol_rank: float) -> np.ndarray:
    """Clean an interior-point solution of the trace relaxation.

    Interior-point methods converge to the relative interior of the optimal
    face, so a rank-one optimum can hide behind a higher-rank one when the
    optimum is not unique; rank reduction along the face recovers it.
    """
    X, rank = _truncate(np.ascontiguousarray(X), S, tol_rank)
    if rank > 1:
        X, rank = _truncate(_reduce_rank(X, S, tol_rank), S, tol_rank)
    return X


def solve_trace_relaxation(
    ellipsoids: Sequence[InfoEllipsoid],
    backend: str = "barrier",
    tol_rank: float = TOL_RANK,
    opts: sdp.BarrierOptions | None = None,
) -> CertificateSolution:
    """``max Tr(X)`` s.t. ``Tr(X S_j) <= 1``, ``X >= 0``; the rank-one constraint is dropped.

    When the optimum is not unique the returned ``X`` is an extreme point of the
    optimal face, so a rank-one optimum is found whenever one exists.
    """
    S = _stack(ellipsoids)
    if len(ellipsoids) == 1:
        w, V = np.linalg.eigh(S[0])
        X = np.outer(V[:, 0], V[:, 0]) / w[0]
        return CertificateSolution(X, float(1.0 / w[0]), 1)
    iters = 0
    if backend == "barrier":
        try:
            X, _, iters = sdp.trace_relaxation(S, opts)
        except sdp.SolverError as exc:
            raise FusionError(exc.status, str(exc)) from exc
        except np.linalg.LinAlgError as exc:
            raise FusionError("numerical_error", str(exc)) from exc
    elif backend == "cvxpy":
        X = _cvxpy_trace_relaxation(S)
    else:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    X = _polish(X, S, tol_rank)
    return CertificateSolution(X, float(np.trace(X)), numerical_rank(X, tol_rank), iters)


def certify(
    cert: CertificateSolution,
    fusion: FusionResult,
    tol_rank: float = TOL_RANK,
    tol_rho: float = TOL_RHO,
) -> CertificationRecord:
    """Rank of the relaxed optimum and ``rho = Tr(X*) * lambda_min(S*)``.

    Certified iff the rank is one and ``rho`` equals one within ``tol_rho``.
    """
    rank = numerical_rank(cert.X_star, tol_rank)
    rho_raw = cert.trace_X * float(la.sym_eigvalsh(fusion.S_star)[0])
    anomaly = rho_raw > 1.0 + RHO_ANOMALY
    if anomaly:
        log.warning("certificate anomaly: rho = %.9f exceeds 1", rho_raw)
    rho = float(np.clip(rho_raw, 0.0, 1.0))
    certified = rank == 1 and abs(rho_raw - 1.0) <= tol_rho
    return CertificationRecord(rank, rho, rho_raw, certified, anomaly)


def fuse_and_certify(
    ellipsoids: Sequence[InfoEllipsoid],
    backend: str = "barrier",
    tol_rank: float = TOL_RANK,
    tol_rho: float = TOL_RHO,
    opts: sdp.BarrierOptions | None = None,
) -> FusionOutcome:
    fusion = solve_outer_lj(ellipsoids, backend, opts)
    cert = solve_trace_relaxation(ellipsoids, backend, tol_rank, opts)
    return FusionOutcome(fusion, cert, certify(cert, fusion, tol_rank, tol_rho))


def lemma3_residuals(fusion: FusionResult, ellipsoids: Sequence[InfoEllipsoid]) -> dict[str, float]:
    """Distance of a fusion result from the tight-constraint structure it should have."""
    mix = np.einsum("j,jik->ik", fusion.lam, _stack(ellipsoids))
    n = mix.shape[0]
    return {
        "weight_sum": abs(float(fusion.lam.sum()) - 1.0),
        "bound_gap": float(np.linalg.norm(fusion.S_star - mix) / np.linalg.norm(fusion.S_star)),
        "row_stochastic": float(np.abs(fusion.P_star @ mix - np.eye(n)).max()),
        "min_weight": float(fusion.lam.min()),
    }


def simplex_grid(p: int, grid_step: float):
    """All weight vectors on the simplex whose entries are multiples of ``grid_step``."""
    m = int(round(1.0 / grid_step))
    for head in itertools.product(range(m + 1), repeat=p - 1):
        rest = m - sum(head)
        if rest >= 0:
            yield np.array(head + (rest,), dtype=float) / m


def oracle_outer_lj(ellipsoids: Sequence[InfoEllipsoid], grid_step: float) -> tuple[float, np.ndarray]:
    """Exhaustive simplex grid for the best ``Tr(sum_j lam_j S_j)``; p <= 4."""
    S = _stack(ellipsoids)
    p = len(S)
    if p > 4:
        raise ValueError("the grid oracle is limited to p <= 4")
    traces = np.trace(S, axis1=1, axis2=2)
    best, best_lam = -np.inf, None
    for lam in simplex_grid(p, grid_step):
        val = float(np.trace(np.einsum("j,jik->ik", lam, S))) if p > 1 else float(traces[0])
        if val > best + 1e-15:
            best, best_lam = val, lam
    return best, best_lam


def _cvxpy_outer_lj(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    import cvxpy as cp

    p, n, _ = S.shape
    scale = n / np.trace(S, axis1=1, axis2=2).max()
    Sv = cp.Variable((n, n), symmetric=True)
    lam = cp.Variable(p, nonneg=True)
    mix = sum(lam[j] * (scale * S[j]) for j in range(p))
    prob = cp.Problem(cp.Maximize(cp.trace(Sv)), [Sv >> 0, mix - Sv >> 0, cp.sum(lam) <= 1])
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise FusionError(prob.status, "cvxpy outer ellipsoid fusion")
    S_star = 0.5 * (Sv.value + Sv.value.T) / scale
    return S_star, np.clip(lam.value, 0.0, None)


def _cvxpy_trace_relaxation(S: np.ndarray) -> np.ndarray:
    import cvxpy as cp

    p, n, _ = S.shape
    X = cp.Variable((n, n), PSD=True)
    prob = cp.Problem(cp.Maximize(cp.trace(X)), [cp.trace(X @ S[j]) <= 1 for j in range(p)])
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise FusionError(prob.status, "cvxpy trace relaxation")
    return 0.5 * (X.value + X.value.T)


def load_instance(text: str) -> list[InfoEllipsoid]:
    """Parse a fusion instance: ``{"ellipsoids": [{"S": [[...]], "s": [...]}, ...]}``.

    ``s`` may be omitted (zeros); ``x`` may be given instead and is converted
    to ``s = S x``.  Raises ``NotPositiveDefiniteError`` for non-PD matrices
    and ``ValueError`` for anything malformed.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"instance is not valid JSON: {exc}") from exc
    items = data.get("ellipsoids") if isinstance(data, dict) else None
    if not isinstance(items, list) or not items:
        raise ValueError('instance must hold a nonempty "ellipsoids" list')
    out = []
    for idx, item in enumerate(items):
        if not isinstance(item, dict) or "S" not in item:
            raise ValueError(f'ellipsoid {idx} needs an "S" matrix')
        S = np.asarray(item["S"], dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError(f"ellipsoid {idx}: S must be square, got shape {S.shape}")
        if "s" in item:
            s = np.asarray(item["s"], dtype=float)
        elif "x" in item:
            s = S @ np.asarray(item["x"], dtype=float)
        else:
            s = np.zeros(S.shape[0])
        try:
            out.append(InfoEllipsoid(S, s))
        except NotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(f"ellipsoid {idx}: {exc}") from None
    _stack(out)
    return out


def dump_instance(ellipsoids: Sequence[InfoEllipsoid], outcome: FusionOutcome | None = None) -> str:
    """Structured text (JSON) for one fusion instance and, optionally, its solution."""
    data: dict = {"ellipsoids": [{"S": e.S.tolist(), "s": e.s.tolist()} for e in ellipsoids]}
    if outcome is not None:
        f, c, r = outcome.fusion, outcome.certificate, outcome.record
        data["result"] = {
            "lambda": f.lam.tolist(),
            "S_star": f.S_star.tolist(),
            "x_star": f.x_star.tolist(),
            "trace_S_star": f.objective,
            "X_star": None if c is None else c.X_star.tolist(),
            "trace_X_star": None if c is None else c.trace_X,
            "rank": r.rank,
            "rho": r.rho,
            "rho_raw": r.rho_raw,
            "certified": r.certified,
            "anomaly": r.anomaly,
        }
    return json.dumps(data, indent=2)
