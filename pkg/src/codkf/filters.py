"""Per-node estimators: the certified fusion filter, the consensus baseline and the centralised KF.

Every filter runs the same information-form prediction,
``S_bar(k+1) = (A M A^T + Q)^-1`` and ``x_bar(k+1) = A x_hat``; they differ in
how a node turns its inbox into ``(M, x_hat)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from . import fusion as fz
from .linalg import spd_inverse
from .model import LinearSystem, SensorModel
from .sdp import BarrierOptions

CODKF = "codkf"
CDKF = "cdkf"
CKF = "ckf"
FAMILIES = (CODKF, CDKF, CKF)
# baselines from the diffusion-KF literature; named so configs can refer to them
EXTENSION_FAMILIES = ("hdfkf", "hadfkf")


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


spd_inv = spd_inverse


@dataclass(frozen=True)
class NodeState:
    node_id: int
    x_bar: np.ndarray
    S_bar: np.ndarray
    M: np.ndarray | None = None
    x_hat: np.ndarray | None = None
    last_cert: fz.CertificationRecord | None = None

    @property
    def s_bar(self) -> np.ndarray:
        return self.S_bar @ self.x_bar


def initial_state(node_id: int, x0: np.ndarray, P0: np.ndarray) -> NodeState:
    return NodeState(node_id, np.asarray(x0, dtype=float).copy(), spd_inv(np.asarray(P0, dtype=float)))


@dataclass(frozen=True)
class InfoMessage:
    sender: int
    k: int
    U: np.ndarray
    u: np.ndarray
    S_bar: np.ndarray
    s_bar: np.ndarray

    @cached_property
    def x_bar(self) -> np.ndarray:
        return np.linalg.solve(self.S_bar, self.s_bar)


def measurement_information(sensor: SensorModel, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(U, u) = (H^T R^-1 H, H^T R^-1 z)``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (sensor.m,):
        raise ValueError(f"measurement must have length {sensor.m}, got shape {z.shape}")
    HtRi = sensor.H.T @ spd_inv(sensor.R)
    return _sym(HtRi @ sensor.H), HtRi @ z


def make_message(state: NodeState, sensor: SensorModel, z: np.ndarray, k: int = 0) -> InfoMessage:
    U, u = measurement_information(sensor, z)
    return InfoMessage(state.node_id, k, U, u, state.S_bar, state.s_bar)


def aggregate_measurements(inbox: Sequence[InfoMessage], members: Sequence[int] | None = None):
    """Average measurement information over the closed neighbourhood.

    ``members`` is the expected sender set; a missing or duplicated sender is an error.
    """
    if not inbox:
        raise ValueError("empty inbox")
    if members is not None:
        senders = sorted(m.sender for m in inbox)
        if senders != sorted(members):
            missing = sorted(set(members) - set(senders))
            raise ValueError(f"inbox does not match neighbourhood {sorted(members)}: senders {senders}, missing {missing}")
    p = len(inbox)
    Y = sum(m.U for m in inbox) / p
    y = sum(m.u for m in inbox) / p
    return Y, y


def predict(sys: LinearSystem, M: np.ndarray, x_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(x_bar, S_bar)`` for the next step."""
    P_bar = _sym(sys.A @ M @ sys.A.T + sys.Q)
    return sys.A @ x_hat, spd_inv(P_bar)


def _information_update(S: np.ndarray, x: np.ndarray, Y: np.ndarray, y: np.ndarray):
    M = spd_inv(S + Y)
    return M, x + M @ (y - Y @ x)


def _by_sender(inbox: Sequence[InfoMessage]) -> list[InfoMessage]:
    return sorted(inbox, key=lambda m: m.sender)


def codkf_step(
    state: NodeState,
    inbox: Sequence[InfoMessage],
    Y: np.ndarray,
    y: np.ndarray,
    sys: LinearSystem,
    backend: str = "barrier",
    tol_rank: float = fz.TOL_RANK,
    tol_rho: float = fz.TOL_RHO,
    opts: BarrierOptions | None = None,
) -> tuple[NodeState, fz.CertificationRecord]:
    """Fuse neighbour predictions, certify, update and predict.

    If the fusion solver fails the node keeps its own prediction and the
    record says why; a failure of the certificate problem alone keeps the
    fused prediction but marks the step non-certified.
    """
    msgs = _by_sender(inbox)
    ellipsoids = [fz.InfoEllipsoid(m.S_bar, m.s_bar) for m in msgs]
    try:
        fused = fz.solve_outer_lj(ellipsoids, backend, opts)
        S_f, x_f = fused.S_star, fused.x_star
        try:
            cert = fz.solve_trace_relaxation(ellipsoids, backend, tol_rank, opts)
            record = fz.certify(cert, fused, tol_rank, tol_rho)
        except fz.FusionError as exc:
            record = fz.CertificationRecord.failed(f"certificate: {exc.status}")
    except fz.FusionError as exc:
        S_f, x_f = state.S_bar, state.x_bar
        record = fz.CertificationRecord.failed(f"fusion: {exc.status}")
    M, x_hat = _information_update(S_f, x_f, Y, y)
    x_bar, S_bar = predict(sys, M, x_hat)
    return NodeState(state.node_id, x_bar, S_bar, M, x_hat, record), record


def codkf_consensus_form(
    own: NodeState, inbox: Sequence[InfoMessage], fused: fz.FusionResult, Y: np.ndarray, y: np.ndarray
) -> np.ndarray:
    """The fused update written as own-prediction innovation plus weighted disagreement.

    ``x_hat = x_i + M(y - Y x_i) + (I - M Y) P* sum_j lam_j S_j (x_j - x_i)``;
    it equals the direct form whenever ``P* sum_j lam_j S_j = I``.
    """
    msgs = _by_sender(inbox)
    M = spd_inv(fused.S_star + Y)
    xi = own.x_bar
    pull = sum(l * m.S_bar @ (m.x_bar - xi) for l, m in zip(fused.lam, msgs))
    return xi + M @ (y - Y @ xi) + (np.eye(len(xi)) - M @ Y) @ fused.P_star @ pull


def consensus_gain(M: np.ndarray) -> float:
    """``1 / (||M||_F + 1)``."""
    return 1.0 / (np.linalg.norm(M, "fro") + 1.0)


def cdkf_step(
    state: NodeState,
    inbox: Sequence[InfoMessage],
    Y: np.ndarray,
    y: np.ndarray,
    sys: LinearSystem,
    gamma_rule=consensus_gain,
) -> NodeState:
    """Information update on the node's own prediction plus a consensus pull toward neighbours."""
    M, x_hat = _information_update(state.S_bar, state.x_bar, Y, y)
    disagreement = np.zeros_like(state.x_bar)
    for m in inbox:
        if m.sender != state.node_id:
            disagreement += m.x_bar - state.x_bar
    x_hat = x_hat + gamma_rule(M) * (M @ disagreement)
    x_bar, S_bar = predict(sys, M, x_hat)
    return NodeState(state.node_id, x_bar, S_bar, M, x_hat)


def centralized_kf_step(
    state: NodeState,
    sensors: Sequence[SensorModel],
    zs: Sequence[np.ndarray],
    sys: LinearSystem,
) -> NodeState:
    """Information filter that sums (not averages) every sensor's information."""
    if len(sensors) != len(zs):
        raise ValueError("one measurement per sensor is required")
    Usum = np.zeros_like(state.S_bar)
    usum = np.zeros_like(state.x_bar)
    for sensor, z in zip(sensors, zs):
        U, u = measurement_information(sensor, z)
        Usum += U
        usum += u
    M = spd_inv(state.S_bar + Usum)
    x_hat = M @ (state.s_bar + usum)
    x_bar, S_bar = predict(sys, M, x_hat)
    return replace(state, x_bar=x_bar, S_bar=S_bar, M=M, x_hat=x_hat)


def hdfkf_step(*args, **kwargs):
    raise NotImplementedError("the hdfkf baseline is an extension point and is not implemented")


def hadfkf_step(*args, **kwargs):
    raise NotImplementedError("the hadfkf baseline is an extension point and is not implemented")
