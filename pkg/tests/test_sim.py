from __future__ import annotations

import math

import numpy as np
import pytest
from test_filters import reference_kf

from codkf.config import ExperimentConfig
from codkf.model import measure
from codkf.sim import aggregate, detect_divergence, engine_from_config, monte_carlo, run_streams, simulate_run

SMALL = ExperimentConfig(nodes=5, steps=30, runs=2, edge_density=0.5)


def test_detect_divergence_examples():
    assert not detect_divergence([0.1, 0.2, 1e-3])
    assert detect_divergence([0.1, math.nan])
    assert detect_divergence([math.inf])
    assert detect_divergence([2e6])
    assert not detect_divergence([2e6], ceiling=1e7)
    with pytest.raises(ValueError):
        detect_divergence([])


def test_zero_steps_gives_empty_metrics():
    cfg = SMALL.replace(steps=0)
    assert engine_from_config(cfg, 0).run(0) == []
    run = simulate_run(cfg, 0)
    assert run.sq_error["codkf"].shape == (0, 5)


def test_single_node_engine_matches_reference_kf():
    cfg = ExperimentConfig(nodes=1, steps=50, filters=("codkf",))
    engine = engine_from_config(cfg, 3)
    sensor = engine.scenario.sensors[0]
    x0 = engine.states["codkf"][0].x_bar.copy()
    P0 = np.linalg.inv(engine.states["codkf"][0].S_bar)
    rng = run_streams(cfg.seed, 3).measurement
    zs = [measure(sensor, x, rng) for x in engine.truth[:50]]
    ref = reference_kf(engine.sys, sensor, x0, P0, zs)
    for k, sm in enumerate(engine.run(50)):
        err = np.sum((ref[k][0] - engine.truth[k]) ** 2)
        assert abs(sm.network_mse("codkf") - err) <= 1e-10


def test_same_seed_same_metrics():
    a, b = simulate_run(SMALL, 1), simulate_run(SMALL, 1)
    for fam in SMALL.filters:
        assert np.array_equal(a.sq_error[fam], b.sq_error[fam], equal_nan=True)
    assert np.array_equal(a.rho, b.rho, equal_nan=True)


def test_runs_are_independent_draws():
    a, b = simulate_run(SMALL, 0), simulate_run(SMALL, 1)
    assert not np.array_equal(a.sq_error["ckf"], b.sq_error["ckf"])


def test_node_order_does_not_matter():
    a = simulate_run(SMALL, 0)
    b = simulate_run(SMALL, 0, node_order=[4, 2, 0, 3, 1])
    for fam in SMALL.filters:
        assert np.array_equal(a.sq_error[fam], b.sq_error[fam])
    with pytest.raises(ValueError):
        simulate_run(SMALL, 0, node_order=[0, 0, 1, 2, 3])


def test_ckf_beats_distributed_filters_on_average():
    res = monte_carlo(SMALL.replace(steps=200, runs=4))
    for fam in ("codkf", "cdkf"):
        # paired: both families averaged over the runs the distributed one survived
        ok = [r for r in res.runs if r.diverged[fam] is None]
        if not ok:
            continue
        tail = {f: np.mean([r.network_mse(f)[-40:] for r in ok]) for f in ("ckf", fam)}
        assert tail["ckf"] <= tail[fam]


def test_single_run_aggregate_equals_run():
    run = simulate_run(SMALL, 0)
    res = aggregate(SMALL.replace(runs=1), [run])
    for fam in SMALL.filters:
        np.testing.assert_array_equal(res.mean_mse[fam], run.network_mse(fam))
    np.testing.assert_array_equal(res.mean_rho, np.nanmean(run.rho, axis=1))
    assert res.cert_rate == run.certified.mean()


def test_diverged_family_is_frozen():
    cfg = SMALL.replace(divergence_ceiling=1e-12, steps=10)
    run = simulate_run(cfg, 0)
    for fam in cfg.filters:
        assert run.diverged[fam] == 0 and run.completed(fam) == 1
        assert np.isnan(run.sq_error[fam][1:]).all()
    res = aggregate(cfg, [run])
    assert res.success_rate("codkf") == 0.0


def test_truth_exhaustion_is_an_error():
    engine = engine_from_config(SMALL.replace(steps=2), 0)
    engine.run(2)
    with pytest.raises(RuntimeError):
        engine.step()


def test_monte_carlo_rejects_zero_runs():
    with pytest.raises(ValueError):
        monte_carlo(SMALL, runs=0)
