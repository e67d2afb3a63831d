"""Distributed Kalman filtering with certified fusion of neighbour predictions."""

from .config import ExperimentConfig, load_config
from .filters import InfoMessage, NodeState, cdkf_step, centralized_kf_step, codkf_step
from .fusion import (
    CertificateSolution,
    CertificationRecord,
    FusionError,
    FusionResult,
    InfoEllipsoid,
    NotPositiveDefiniteError,
    certify,
    oracle_outer_lj,
    solve_outer_lj,
    solve_trace_relaxation,
)
from .model import LinearSystem, SensorModel, build_turn_system
from .sim import RoundEngine, detect_divergence, monte_carlo
from .topology import Graph, make_scenario, random_connected_graph

__version__ = "0.1.0"
