from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codkf.topology import Graph, TopologyError, make_scenario, random_connected_graph


def _connected_by_dfs(adj: np.ndarray) -> bool:
    seen, stack = {0}, [0]
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(adj[i]):
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return len(seen) == adj.shape[0]


def test_single_node():
    g = random_connected_graph(1, 0.5, np.random.default_rng(0))
    assert g.node_count == 1
    assert g.closed_neighborhood(0) == [0]


def test_two_nodes_full_density():
    g = random_connected_graph(2, 1.0, np.random.default_rng(0))
    assert g.neighbors(0) == [1] and g.neighbors(1) == [0]
    assert len(g.closed_neighborhood(0)) == len(g.closed_neighborhood(1)) == 2


def test_default_network_is_sparse_and_connected():
    g = random_connected_graph(20, 0.15, np.random.default_rng(3))
    assert _connected_by_dfs(g.adjacency)
    mean_degree = g.adjacency.sum() / 20
    assert 1 <= mean_degree <= 6


@settings(max_examples=40)
@given(st.integers(1, 30), st.floats(0.1, 1.0), st.integers(0, 2**32 - 1))
def test_generated_graphs_are_symmetric_irreflexive_connected(N, density, seed):
    g = random_connected_graph(N, density, np.random.default_rng(seed))
    A = g.adjacency
    assert np.array_equal(A, A.T)
    assert not A.diagonal().any()
    assert _connected_by_dfs(A)
    for i in range(N):
        assert len(g.closed_neighborhood(i)) == g.degree(i) + 1


def test_generator_errors():
    with pytest.raises(ValueError):
        random_connected_graph(0, 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        random_connected_graph(5, 0.0, np.random.default_rng(0))
    with pytest.raises(TopologyError, match="larger edge density"):
        random_connected_graph(60, 1e-4, np.random.default_rng(0))


def test_graph_validation_and_laplacian():
    with pytest.raises(ValueError):
        Graph(np.array([[0, 1], [0, 0]]))
    with pytest.raises(ValueError):
        Graph(np.eye(2))
    g = Graph.from_edges(3, [(0, 1), (1, 2)])
    np.testing.assert_array_equal(g.laplacian(), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    assert g.is_connected()
    assert not Graph.from_edges(3, [(0, 1)]).is_connected()
    assert Graph.complete(4).degree(2) == 3


@pytest.mark.parametrize("seed", range(20))
def test_experiment_two_has_one_high_quality_node(seed):
    sc = make_scenario(20, 2, np.random.default_rng(seed))
    assert sc.quality.count("high") == 1


@pytest.mark.parametrize("experiment", [1, 2, "custom"])
def test_sensors_never_measure_velocity(experiment):
    sc = make_scenario(20, experiment, np.random.default_rng(5))
    for s, q, kind in zip(sc.sensors, sc.quality, sc.measured):
        assert np.all(s.H[:, 2:] == 0)
        nz = s.H[s.H != 0]
        assert np.all((nz >= 1) & (nz <= 3))
        r = np.diag(s.R)
        lo, hi = (3e-2, 5e-2) if q == "high" else (3.0, 5.0)
        assert np.all((r >= lo) & (r <= hi))
        assert np.count_nonzero(s.R - np.diag(r)) == 0
        assert s.m == len(kind)


def test_some_node_measures_both_axes():
    for seed in range(30):
        sc = make_scenario(3, 1, np.random.default_rng(seed))
        assert "xy" in sc.measured


def test_fraction_measuring_both_axes():
    rng = np.random.default_rng(11)
    kinds = []
    while len(kinds) < 10_000:
        kinds.extend(make_scenario(50, 1, rng, edge_density=0.3).measured)
    frac = np.mean([k == "xy" for k in kinds])
    assert 0.30 <= frac <= 0.37


def test_experiment_one_quality_is_a_fair_coin():
    rng = np.random.default_rng(12)
    q = [x for _ in range(100) for x in make_scenario(20, 1, rng).quality]
    assert 0.45 < q.count("high") / len(q) < 0.55


def test_scenario_reproducible():
    a = make_scenario(20, 1, np.random.default_rng(9))
    b = make_scenario(20, 1, np.random.default_rng(9))
    assert np.array_equal(a.graph.adjacency, b.graph.adjacency)
    assert a.quality == b.quality and a.measured == b.measured
    for s, t in zip(a.sensors, b.sensors):
        assert np.array_equal(s.H, t.H) and np.array_equal(s.R, t.R)


def test_unknown_experiment():
    with pytest.raises(ValueError):
        make_scenario(5, 3, np.random.default_rng(0))
