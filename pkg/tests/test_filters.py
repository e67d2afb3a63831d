from __future__ import annotations

import numpy as np
import pytest
from conftest import random_pd

from codkf import filters as fl
from codkf import fusion as fz
from codkf.model import LinearSystem, SensorModel, build_turn_system, measure, step_truth


def reference_kf(sys, sensor, x0, P0, zs):
    """Covariance-form Kalman filter with a Joseph update, written independently of the package."""
    x, P = np.array(x0, dtype=float), np.array(P0, dtype=float)
    out = []
    I = np.eye(len(x))
    for z in zs:
        H, R = sensor.H, sensor.R
        K = P @ H.T @ np.linalg.inv(H @ P @ H.T + R)
        x = x + K @ (z - H @ x)
        P = (I - K @ H) @ P @ (I - K @ H).T + K @ R @ K.T
        out.append((x.copy(), P.copy()))
        x = sys.A @ x
        P = sys.A @ P @ sys.A.T + sys.Q
    return out


def single_node_codkf(sys, sensor, x0, P0, zs):
    state = fl.initial_state(0, x0, P0)
    out = []
    for k, z in enumerate(zs):
        msg = fl.make_message(state, sensor, z, k)
        Y, y = fl.aggregate_measurements([msg], members=[0])
        state, rec = fl.codkf_step(state, [msg], Y, y, sys)
        assert rec.certified and rec.failure is None
        out.append((state.x_hat, state.M))
    return out


def observations(sys, sensor, x0, steps, seed):
    rng = np.random.default_rng(seed)
    x, zs = np.array(x0, dtype=float), []
    for _ in range(steps):
        zs.append(measure(sensor, x, rng))
        x = step_truth(sys, x, rng)
    return zs


# --- messages ------------------------------------------------------------------


def test_measurement_information_identity():
    z = np.array([1.0, 2.0, 3.0, 4.0])
    U, u = fl.measurement_information(SensorModel(np.eye(4), np.eye(4)), z)
    np.testing.assert_array_equal(U, np.eye(4))
    np.testing.assert_array_equal(u, z)


def test_measurement_information_hand_computed():
    U, u = fl.measurement_information(SensorModel([[1.0, 0, 0, 0]], [[4.0]]), np.array([2.0]))
    np.testing.assert_allclose(u, [0.5, 0, 0, 0])
    np.testing.assert_allclose(U, np.diag([0.25, 0, 0, 0]))
    with pytest.raises(ValueError):
        fl.measurement_information(SensorModel([[1.0, 0, 0, 0]], [[4.0]]), np.array([2.0, 1.0]))


def test_information_vector():
    st = fl.NodeState(0, np.array([1.0, 0, 0, 0]), 2 * np.eye(4))
    np.testing.assert_array_equal(st.s_bar, [2.0, 0, 0, 0])


def _msg(i, U, u=None):
    n = len(U)
    return fl.InfoMessage(i, 0, U, np.zeros(n) if u is None else u, np.eye(n), np.zeros(n))


def test_aggregation_examples():
    U1 = np.eye(2)
    assert fl.aggregate_measurements([_msg(0, U1)])[0] is not None
    np.testing.assert_array_equal(fl.aggregate_measurements([_msg(0, U1)])[0], U1)
    Y, _ = fl.aggregate_measurements([_msg(0, np.eye(2)), _msg(1, 3 * np.eye(2))])
    np.testing.assert_array_equal(Y, 2 * np.eye(2))


def test_aggregation_matches_direct_sum():
    rng = np.random.default_rng(0)
    inbox = [_msg(i, random_pd(rng, 4), rng.standard_normal(4)) for i in range(3)]
    Y, y = fl.aggregate_measurements(inbox, members=[2, 0, 1])
    Ysum = np.zeros((4, 4))
    ysum = np.zeros(4)
    for m in inbox:
        Ysum = Ysum + m.U
        ysum = ysum + m.u
    np.testing.assert_allclose(Y, Ysum / 3, rtol=1e-15)
    np.testing.assert_allclose(y, ysum / 3, rtol=1e-15)


def test_aggregation_missing_neighbour_is_an_error():
    with pytest.raises(ValueError, match="missing \\[2\\]"):
        fl.aggregate_measurements([_msg(0, np.eye(2)), _msg(1, np.eye(2))], members=[0, 1, 2])
    with pytest.raises(ValueError):
        fl.aggregate_measurements([])


# --- CO-DKF ----------------------------------------------------------------------


@pytest.mark.parametrize("H", [np.eye(4)[:2], np.eye(4)[:1] * 2.0])
def test_single_node_matches_reference_kf(H):
    sys = build_turn_system()
    sensor = SensorModel(H, 0.04 * np.eye(len(H)))
    x0, P0 = np.array([0.5, -0.3, 1.2, 0.1]), 10 * np.eye(4)
    zs = observations(sys, sensor, np.array([0.0, 0, 1, 0]), 200, 1)
    for (xa, Pa), (xb, Pb) in zip(single_node_codkf(sys, sensor, x0, P0, zs), reference_kf(sys, sensor, x0, P0, zs)):
        np.testing.assert_allclose(xa, xb, rtol=0, atol=1e-10)
        np.testing.assert_allclose(Pa, Pb, rtol=0, atol=1e-10)


def test_symmetric_network_gives_identical_estimates():
    sys = build_turn_system()
    sensor = SensorModel(np.eye(4)[:2], 0.1 * np.eye(2))
    rng = np.random.default_rng(3)
    states = [fl.initial_state(i, np.ones(4), 5 * np.eye(4)) for i in range(4)]
    for k in range(20):
        z = rng.standard_normal(2)
        inbox = [fl.make_message(s, sensor, z, k) for s in states]
        Y, y = fl.aggregate_measurements(inbox)
        states = [fl.codkf_step(s, inbox, Y, y, sys)[0] for s in states]
        for s in states[1:]:
            np.testing.assert_allclose(s.x_hat, states[0].x_hat, atol=1e-12)
            np.testing.assert_allclose(s.M, states[0].M, atol=1e-12)


def test_trace_non_increasing_without_process_noise():
    sys = LinearSystem(build_turn_system().A, np.zeros((4, 4)))
    sensors = [SensorModel(np.eye(4), 1e-6 * np.eye(4)), SensorModel(np.eye(4)[:1], np.eye(1)), SensorModel(np.eye(4)[1:2], np.eye(1))]
    rng = np.random.default_rng(4)
    states = [fl.initial_state(i, np.zeros(4), np.eye(4)) for i in range(3)]
    traces = []
    for k in range(40):
        inbox = [fl.make_message(s, sn, rng.standard_normal(sn.m), k) for s, sn in zip(states, sensors)]
        Y, y = fl.aggregate_measurements(inbox)
        states = [fl.codkf_step(s, inbox, Y, y, sys)[0] for s in states]
        traces.append(np.trace(states[0].M))
    assert all(b <= a * (1 + 1e-9) for a, b in zip(traces, traces[1:]))


def test_consensus_form_matches_direct_update():
    rng = np.random.default_rng(5)
    msgs = []
    for i in range(4):
        S = random_pd(rng, 4)
        msgs.append(fl.InfoMessage(i, 0, random_pd(rng, 4) * 0.1, rng.standard_normal(4), S, S @ rng.standard_normal(4)))
    own = fl.NodeState(2, msgs[2].x_bar, msgs[2].S_bar)
    Y, y = fl.aggregate_measurements(msgs)
    fused = fz.solve_outer_lj([fz.InfoEllipsoid(m.S_bar, m.s_bar) for m in msgs])
    direct = fl.spd_inv(fused.S_star + Y) @ (fused.S_star @ fused.x_star + y)
    np.testing.assert_allclose(fl.codkf_consensus_form(own, msgs, fused, Y, y), direct, atol=1e-8)


def test_fusion_failure_falls_back_to_own_prediction(monkeypatch):
    def fail(*a, **k):
        raise fz.FusionError("numerical_error")

    monkeypatch.setattr(fz, "solve_outer_lj", fail)
    rng = np.random.default_rng(6)
    S = random_pd(rng, 4)
    st = fl.NodeState(0, np.ones(4), S)
    other = fl.InfoMessage(1, 0, np.zeros((4, 4)), np.zeros(4), 3 * S, np.zeros(4))
    mine = fl.InfoMessage(0, 0, np.zeros((4, 4)), np.zeros(4), S, S @ np.ones(4))
    Y, y = 0.1 * np.eye(4), np.zeros(4)
    new, rec = fl.codkf_step(st, [mine, other], Y, y, build_turn_system())
    assert not rec.certified and rec.failure == "fusion: numerical_error"
    np.testing.assert_allclose(new.M, np.linalg.inv(S + Y), atol=1e-12)


def test_certificate_failure_keeps_fused_prediction(monkeypatch):
    def fail(*a, **k):
        raise fz.FusionError("max_iterations")

    monkeypatch.setattr(fz, "solve_trace_relaxation", fail)
    st = fl.NodeState(0, np.zeros(2), np.eye(2))
    msgs = [fl.InfoMessage(0, 0, np.zeros((2, 2)), np.zeros(2), np.eye(2), np.zeros(2)),
            fl.InfoMessage(1, 0, np.zeros((2, 2)), np.zeros(2), 2 * np.eye(2), np.zeros(2))]
    sys = LinearSystem(np.eye(2), np.zeros((2, 2)))
    new, rec = fl.codkf_step(st, msgs, np.eye(2), np.zeros(2), sys)
    assert rec.failure == "certificate: max_iterations" and not rec.certified
    np.testing.assert_allclose(new.M, np.eye(2) / 3, atol=1e-8)


# --- CDKF and CKF ----------------------------------------------------------------


def test_consensus_gain():
    M = np.diag([3.0, 0.0])  # Frobenius norm 3
    assert fl.consensus_gain(M) == 0.25


def test_cdkf_alone_is_information_filter():
    sys = build_turn_system()
    sensor = SensorModel(np.eye(4)[:2], 0.04 * np.eye(2))
    x0, P0 = np.array([0.5, -0.3, 1.2, 0.1]), 10 * np.eye(4)
    zs = observations(sys, sensor, np.array([0.0, 0, 1, 0]), 50, 2)
    state = fl.initial_state(0, x0, P0)
    for z, (xr, Pr) in zip(zs, reference_kf(sys, sensor, x0, P0, zs)):
        msg = fl.make_message(state, sensor, z)
        Y, y = fl.aggregate_measurements([msg])
        state = fl.cdkf_step(state, [msg], Y, y, sys)
        np.testing.assert_allclose(state.x_hat, xr, atol=1e-10)
        np.testing.assert_allclose(state.M, Pr, atol=1e-10)


def test_cdkf_equal_predictions_have_no_consensus_term():
    sys = build_turn_system()
    st = fl.NodeState(0, np.ones(4), 2 * np.eye(4))
    msgs = [fl.InfoMessage(i, 0, 0.5 * np.eye(4), np.ones(4), 2 * np.eye(4) * (i + 1), 2 * np.ones(4) * (i + 1)) for i in range(3)]
    Y, y = fl.aggregate_measurements(msgs)
    a = fl.cdkf_step(st, msgs, Y, y, sys)
    b = fl.cdkf_step(st, msgs, Y, y, sys, gamma_rule=lambda M: 0.0)
    np.testing.assert_allclose(a.x_hat, b.x_hat, atol=1e-14)


def test_ckf_single_sensor_matches_reference():
    sys = build_turn_system()
    sensor = SensorModel(np.eye(4)[:2], 0.04 * np.eye(2))
    x0, P0 = np.zeros(4), 10 * np.eye(4)
    zs = observations(sys, sensor, np.array([0.0, 0, 1, 0]), 50, 3)
    state = fl.initial_state(0, x0, P0)
    for z, (xr, Pr) in zip(zs, reference_kf(sys, sensor, x0, P0, zs)):
        state = fl.centralized_kf_step(state, [sensor], [z], sys)
        np.testing.assert_allclose(state.x_hat, xr, atol=1e-10)
        np.testing.assert_allclose(state.M, Pr, atol=1e-10)


def test_ckf_sums_information():
    sys = build_turn_system()
    a = SensorModel(np.eye(4)[:1], np.eye(1))
    b = SensorModel(np.eye(4)[1:2], 2 * np.eye(1))
    st = fl.initial_state(0, np.zeros(4), np.eye(4))
    new = fl.centralized_kf_step(st, [a, b], [np.array([1.0]), np.array([2.0])], sys)
    np.testing.assert_allclose(new.M, np.linalg.inv(np.diag([2.0, 1.5, 1.0, 1.0])), atol=1e-14)
    with pytest.raises(ValueError):
        fl.centralized_kf_step(st, [a, b], [np.array([1.0])], sys)


@pytest.mark.parametrize("fn", [fl.hdfkf_step, fl.hadfkf_step])
def test_extension_families_are_not_implemented(fn):
    with pytest.raises(NotImplementedError):
        fn()
