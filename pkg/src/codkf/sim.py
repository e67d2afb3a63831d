"""Synchronous round engine, per-step metrics and the Monte Carlo driver.

One round at step k: every sensor measures the true state x(k); each node of
each filter family broadcasts its prediction and measurement information
(phase 1, a frozen snapshot); every node then updates from its closed
neighbourhood's messages (phase 2); errors against x(k) are recorded; finally
the truth advances to x(k+1).  All families see the same measurements.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import filters as fl
from .config import ExperimentConfig
from .model import LinearSystem, build_turn_system, measure, sample_gaussian, simulate_trajectory
from .topology import NetworkScenario, make_scenario

log = logging.getLogger(__name__)

DEFAULT_CEILING = 1e6


def detect_divergence(window: Sequence[float], ceiling: float = DEFAULT_CEILING) -> bool:
    """True iff any network MSE in the window is non-finite or above ``ceiling``."""
    values = np.asarray(window, dtype=float)
    if values.size == 0:
        raise ValueError("divergence window must be nonempty")
    return bool((~np.isfinite(values)).any() or (values > ceiling).any())


@dataclass(frozen=True)
class RunStreams:
    scenario: np.random.Generator
    trajectory: np.random.Generator
    measurement: np.random.Generator
    init: np.random.Generator


def run_streams(master_seed: int, run_id: int) -> RunStreams:
    """Independent generators for one run, derived from the master seed."""
    run_seq = np.random.SeedSequence(master_seed, spawn_key=(run_id,))
    return RunStreams(*(np.random.default_rng(s) for s in run_seq.spawn(4)))


@dataclass
class FamilyMetrics:
    """One filter family at one step; arrays are indexed by node."""

    sq_error: np.ndarray
    trace_M: np.ndarray
    rho: np.ndarray
    cert_rank: np.ndarray
    certified: np.ndarray

    @property
    def network_mse(self) -> float:
        return float(self.sq_error.sum())


@dataclass
class StepMetrics:
    k: int
    families: dict[str, FamilyMetrics]

    def network_mse(self, family: str) -> float:
        return self.families[family].network_mse


def _empty_metrics(N: int) -> FamilyMetrics:
    return FamilyMetrics(
        np.zeros(N), np.zeros(N), np.full(N, np.nan), np.zeros(N, dtype=int), np.zeros(N, dtype=bool)
    )


class RoundEngine:
    """Truth, network and every enabled filter family for one Monte Carlo run."""

    def __init__(
        self,
        sys: LinearSystem,
        scenario: NetworkScenario,
        truth: np.ndarray,
        x0: np.ndarray,
        P0: np.ndarray,
        meas_rng: np.random.Generator,
        families: Sequence[str] = fl.FAMILIES,
        backend: str = "barrier",
        tol_rank: float = 1e-6,
        tol_rho: float = 1e-3,
        ceiling: float = DEFAULT_CEILING,
        node_order: Sequence[int] | None = None,
    ):
        self.sys = sys
        self.scenario = scenario
        self.truth = np.asarray(truth, dtype=float)
        self.meas_rng = meas_rng
        self.families = tuple(families)
        self.backend = backend
        self.tol_rank = tol_rank
        self.tol_rho = tol_rho
        self.ceiling = ceiling
        N = scenario.node_count
        self.node_order = list(node_order) if node_order is not None else list(range(N))
        if sorted(self.node_order) != list(range(N)):
            raise ValueError("node_order must be a permutation of the node ids")
        self.neighborhoods = [scenario.graph.closed_neighborhood(i) for i in range(N)]
        self.k = 0
        self.states: dict[str, list[fl.NodeState]] = {}
        for fam in self.families:
            if fam not in fl.FAMILIES:
                raise ValueError(f"filter family {fam!r} is not implemented")
            count = 1 if fam == fl.CKF else N
            self.states[fam] = [fl.initial_state(i, x0, P0) for i in range(count)]
        self.diverged: dict[str, int | None] = {fam: None for fam in self.families}
        self.fusion_failures = 0
        self.anomalies = 0

    @property
    def node_count(self) -> int:
        return self.scenario.node_count

    @property
    def max_steps(self) -> int:
        return len(self.truth) - 1

    def step(self) -> StepMetrics:
        if self.k >= self.max_steps:
            raise RuntimeError("truth trajectory exhausted")
        k, x = self.k, self.truth[self.k]
        zs = [measure(s, x, self.meas_rng) for s in self.scenario.sensors]
        info = [fl.measurement_information(s, z) for s, z in zip(self.scenario.sensors, zs)]
        out: dict[str, FamilyMetrics] = {}
        for fam in self.families:
            if self.diverged[fam] is not None:
                continue
            if fam == fl.CKF:
                metrics = self._step_ckf(x, zs)
            else:
                metrics = self._step_distributed(fam, x, info, k)
            out[fam] = metrics
            if detect_divergence([metrics.network_mse], self.ceiling):
                self.diverged[fam] = k
                log.info("family %s diverged at step %d", fam, k)
        self.k += 1
        return StepMetrics(k, out)

    def _step_ckf(self, x, zs) -> FamilyMetrics:
        (state,) = self.states[fl.CKF]
        new = fl.centralized_kf_step(state, self.scenario.sensors, zs, self.sys)
        self.states[fl.CKF] = [new]
        N = self.node_count
        m = _empty_metrics(N)
        m.sq_error[:] = float(np.sum((new.x_hat - x) ** 2))
        m.trace_M[:] = float(np.trace(new.M))
        return m

    def _step_distributed(self, fam, x, info, k) -> FamilyMetrics:
        states = self.states[fam]
        # phase 1: immutable snapshot of every broadcast
        msgs = [
            fl.InfoMessage(i, k, U, u, st.S_bar, st.s_bar) for i, (st, (U, u)) in enumerate(zip(states, info))
        ]
        # phase 2: each node reads only the snapshot
        new_states: list[fl.NodeState | None] = [None] * len(states)
        m = _empty_metrics(len(states))
        for i in self.node_order:
            inbox = [msgs[j] for j in self.neighborhoods[i]]
            Y, y = fl.aggregate_measurements(inbox)
            if fam == fl.CODKF:
                new, rec = fl.codkf_step(states[i], inbox, Y, y, self.sys, self.backend, self.tol_rank, self.tol_rho)
                m.rho[i] = rec.rho
                m.cert_rank[i] = rec.rank
                m.certified[i] = rec.certified
                self.fusion_failures += rec.failure is not None
                self.anomalies += rec.anomaly
            else:
                new = fl.cdkf_step(states[i], inbox, Y, y, self.sys)
            new_states[i] = new
            m.sq_error[i] = float(np.sum((new.x_hat - x) ** 2))
            m.trace_M[i] = float(np.trace(new.M))
        self.states[fam] = new_states
        return m

    def run(self, steps: int) -> list[StepMetrics]:
        """Advance ``steps`` rounds; a diverged family stops and is absent from later steps."""
        return [self.step() for _ in range(steps)]


def engine_from_config(config: ExperimentConfig, run_id: int, node_order=None) -> RoundEngine:
    streams = run_streams(config.seed, run_id)
    sys = build_turn_system(config.w_p, config.T, config.q, config.a_variant)
    scenario = make_scenario(
        config.nodes, config.experiment, streams.scenario, config.edge_density, config.high_quality_prob
    )
    x_true0 = np.array(config.x_true0)
    truth = simulate_trajectory(sys, x_true0, config.steps, streams.trajectory).states
    P0 = config.p0_scale * np.eye(sys.n)
    x0 = x_true0 + sample_gaussian(P0, streams.init) if config.x0_mode == "perturbed" else x_true0.copy()
    return RoundEngine(
        sys, scenario, truth, x0, P0, streams.measurement, config.filters, config.backend,
        config.tol_rank, config.tol_rho, config.divergence_ceiling, node_order,
    )


@dataclass
class RunResult:
    """Per-run metric tables; arrays are (steps, N) with NaN after divergence."""

    run_id: int
    steps: int
    node_count: int
    sq_error: dict[str, np.ndarray]
    trace_M: dict[str, np.ndarray]
    rho: np.ndarray
    cert_rank: np.ndarray
    certified: np.ndarray
    diverged: dict[str, int | None]
    fusion_failures: int = 0
    anomalies: int = 0
    edges: int = 0

    def network_mse(self, family: str) -> np.ndarray:
        return self.sq_error[family].sum(axis=1)

    def completed(self, family: str) -> int:
        """Number of steps the family ran (all of them unless it diverged)."""
        d = self.diverged[family]
        return self.steps if d is None else d + 1


def simulate_run(config: ExperimentConfig, run_id: int, node_order=None) -> RunResult:
    engine = engine_from_config(config, run_id, node_order)
    N, steps = engine.node_count, config.steps
    sq = {f: np.full((steps, N), np.nan) for f in config.filters}
    tr = {f: np.full((steps, N), np.nan) for f in config.filters}
    rho = np.full((steps, N), np.nan)
    rank = np.zeros((steps, N), dtype=int)
    cert = np.zeros((steps, N), dtype=bool)
    for k in range(steps):
        sm = engine.step()
        for fam, m in sm.families.items():
            sq[fam][k] = m.sq_error
            tr[fam][k] = m.trace_M
            if fam == fl.CODKF:
                rho[k], rank[k], cert[k] = m.rho, m.cert_rank, m.certified
        if all(d is not None for d in engine.diverged.values()):
            break
    return RunResult(
        run_id, steps, N, sq, tr, rho, rank, cert, dict(engine.diverged),
        engine.fusion_failures, engine.anomalies, int(engine.scenario.graph.adjacency.sum() // 2),
    )


@dataclass
class MonteCarloResult:
    config: ExperimentConfig
    runs: list[RunResult]
    mean_mse: dict[str, np.ndarray] = field(default_factory=dict)  # (steps,)
    success: dict[str, np.ndarray] = field(default_factory=dict)  # per-run flags
    mean_rho: np.ndarray | None = None
    cert_rate_k: np.ndarray | None = None
    cert_rate: float = math.nan
    rank_one_rate: float = math.nan
    wall_clock: float = 0.0

    def success_rate(self, family: str) -> float:
        return float(self.success[family].mean())

    def steady_state_mse(self, family: str, fraction: float = 0.2) -> float:
        steps = self.config.steps
        tail = max(1, int(round(fraction * steps)))
        return float(np.mean(self.mean_mse[family][steps - tail :]))


def aggregate(config: ExperimentConfig, runs: list[RunResult]) -> MonteCarloResult:
    """Means over runs; each family averages only its non-diverged runs."""
    res = MonteCarloResult(config, runs)
    steps = config.steps
    for fam in config.filters:
        ok = np.array([r.diverged[fam] is None for r in runs])
        res.success[fam] = ok
        if ok.any() and steps:
            res.mean_mse[fam] = np.mean([r.network_mse(fam) for r, good in zip(runs, ok) if good], axis=0)
        else:
            res.mean_mse[fam] = np.full(steps, np.nan)
    if fl.CODKF in config.filters and steps:
        rho = np.stack([r.rho for r in runs])  # (runs, steps, N)
        cert = np.stack([r.certified for r in runs])
        ran = np.stack([np.arange(steps)[:, None] < r.completed(fl.CODKF) for r in runs])
        ran = np.broadcast_to(ran, cert.shape)
        with np.errstate(invalid="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN steps after divergence
            res.mean_rho = np.nanmean(rho, axis=(0, 2)) if np.isfinite(rho).any() else np.full(steps, np.nan)
            res.cert_rate_k = cert.sum(axis=(0, 2)) / np.maximum(ran.sum(axis=(0, 2)), 1)
        res.cert_rate = float(cert.sum() / max(ran.sum(), 1))
        rank_one = np.stack([r.cert_rank == 1 for r in runs]) & ran
        res.rank_one_rate = float(rank_one.sum() / max(ran.sum(), 1))
    return res


def _simulate(args):
    config, run_id = args
    return simulate_run(config, run_id)


def monte_carlo(config: ExperimentConfig, runs: int | None = None, workers: int | None = None) -> MonteCarloResult:
    """Simulate ``runs`` independent runs (scenario, truth and noise redrawn) and aggregate."""
    runs = config.runs if runs is None else runs
    if runs < 1:
        raise ValueError("runs must be >= 1")
    workers = config.workers if workers is None else workers
    start = time.perf_counter()
    jobs = [(config, r) for r in range(runs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate, jobs))
    else:
        results = [_simulate(j) for j in jobs]
    res = aggregate(config, results)
    res.wall_clock = time.perf_counter() - start
    return res
