"""Communication graphs and the randomised sensor networks used in the experiments."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .model import SensorModel

MAX_GRAPH_ATTEMPTS = 1000
MAX_SENSOR_ATTEMPTS = 1000

H_RANGE = (1.0, 3.0)
R_HIGH_QUALITY = (3e-2, 5e-2)
R_LOW_QUALITY = (3.0, 5.0)
MEASURED = ("x", "y", "xy")


class TopologyError(RuntimeError):
    pass


@dataclass(frozen=True)
class Graph:
    """Undirected graph without self-loops; nodes are ``0..N-1``."""

    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric")
        if adj.diagonal().any():
            raise ValueError("self-loops are not allowed")
        object.__setattr__(self, "adjacency", adj)

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    def closed_neighborhood(self, i: int) -> list[int]:
        """Node ``i`` and its neighbours, in increasing id order."""
        return sorted(self.neighbors(i) + [i])

    def degree(self, i: int) -> int:
        return int(self.adjacency[i].sum())

    def laplacian(self) -> np.ndarray:
        A = self.adjacency.astype(float)
        return np.diag(A.sum(axis=1)) - A

    def is_connected(self) -> bool:
        N = self.node_count
        if N == 0:
            return False
        seen = np.zeros(N, dtype=bool)
        seen[0] = True
        queue = deque([0])
        while queue:
            i = queue.popleft()
            for j in np.flatnonzero(self.adjacency[i] & ~seen):
                seen[j] = True
                queue.append(j)
        return bool(seen.all())

    @classmethod
    def from_edges(cls, N: int, edges) -> Graph:
        adj = np.zeros((N, N), dtype=bool)
        for i, j in edges:
            adj[i, j] = adj[j, i] = True
        return cls(adj)

    @classmethod
    def complete(cls, N: int) -> Graph:
        return cls(~np.eye(N, dtype=bool))


def random_connected_graph(N: int, edge_density: float, rng: np.random.Generator) -> Graph:
    """Erdos-Renyi draw, resampled until connected."""
    if N < 1:
        raise ValueError("N must be at least 1")
    if not 0 < edge_density <= 1:
        raise ValueError("edge_density must lie in (0, 1]")
    iu = np.triu_indices(N, k=1)
    for _ in range(MAX_GRAPH_ATTEMPTS):
        adj = np.zeros((N, N), dtype=bool)
        adj[iu] = rng.random(len(iu[0])) < edge_density
        adj |= adj.T
        g = Graph(adj)
        if g.is_connected():
            return g
    raise TopologyError(
        f"no connected graph in {MAX_GRAPH_ATTEMPTS} draws with N={N}, "
        f"edge_density={edge_density}; try a larger edge density"
    )


@dataclass(frozen=True)
class NetworkScenario:
    graph: Graph
    sensors: tuple[SensorModel, ...]
    quality: tuple[str, ...]  # "high" or "low" per node
    measured: tuple[str, ...]  # "x", "y" or "xy" per node

    @property
    def node_count(self) -> int:
        return self.graph.node_count


def _draw_sensor(kind: str, high: bool, rng: np.random.Generator) -> SensorModel:
    axes = {"x": [0], "y": [1], "xy": [0, 1]}[kind]
    H = np.zeros((len(axes), 4))
    for row, col in enumerate(axes):
        H[row, col] = rng.uniform(*H_RANGE)
    lo, hi = R_HIGH_QUALITY if high else R_LOW_QUALITY
    R = np.diag(rng.uniform(lo, hi, size=len(axes)))
    return SensorModel(H, R)


def make_scenario(
    N: int,
    experiment: int | str,
    rng: np.random.Generator,
    edge_density: float = 0.15,
    high_quality_prob: float = 0.5,
) -> NetworkScenario:
    """Random network with position-only sensors of mixed quality.

    Experiment 1 assigns quality by a fair coin per node; experiment 2 has a
    single, uniformly chosen, high-quality node; "custom" flips a coin with
    probability ``high_quality_prob``.  Sensor assignments are
    redrawn until some node measures both x and y, since no single-axis sensor
    observes the full state on its own.
    """
    if experiment not in (1, 2, "custom"):
        raise ValueError(f"experiment must be 1, 2 or 'custom', got {experiment!r}")
    graph = random_connected_graph(N, edge_density, rng)
    for _ in range(MAX_SENSOR_ATTEMPTS):
        kinds = [MEASURED[i] for i in rng.integers(0, 3, size=N)]
        if "xy" in kinds:
            break
    else:
        raise TopologyError("could not draw an observable sensor assignment")
    if experiment != 2:
        prob = 0.5 if experiment == 1 else high_quality_prob
        high = rng.random(N) < prob
    else:
        high = np.zeros(N, dtype=bool)
        high[rng.integers(N)] = True
    sensors = tuple(_draw_sensor(kind, bool(h), rng) for kind, h in zip(kinds, high))
    quality = tuple("high" if h else "low" for h in high)
    return NetworkScenario(graph, sensors, quality, tuple(kinds))
