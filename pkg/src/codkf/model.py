"""Ground-truth linear dynamics, sensor models and seeded Gaussian sampling."""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np

EPS_PSD = 1e-10

_noise_enabled = contextvars.ContextVar("noise_enabled", default=True)


@contextlib.contextmanager
def noiseless():
    """Disable process and measurement noise inside the block (deterministic tests)."""
    token = _noise_enabled.set(False)
    try:
        yield
    finally:
        _noise_enabled.reset(token)


def noise_enabled() -> bool:
    return _noise_enabled.get()


def _check_symmetric(name: str, M: np.ndarray) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")


@dataclass(frozen=True)
class LinearSystem:
    """``x(k+1) = A x(k) + w(k)`` with ``w ~ N(0, Q)``."""

    A: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        _check_symmetric("Q", Q)
        if Q.shape != A.shape:
            raise ValueError(f"Q shape {Q.shape} does not match A shape {A.shape}")
        if np.linalg.eigvalsh(Q)[0] < -EPS_PSD:
            raise ValueError("Q must be positive semidefinite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Q", Q)

    @property
    def n(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class SensorModel:
    """``z = H x + v`` with ``v ~ N(0, R)``."""

    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        _check_symmetric("R", R)
        if R.shape[0] != H.shape[0]:
            raise ValueError(f"R is {R.shape} but H has {H.shape[0]} rows")
        if np.linalg.eigvalsh(R)[0] <= 0:
            raise ValueError("R must be positive definite")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[1]


@dataclass
class Trajectory:
    states: np.ndarray  # (step_count + 1, n)
    step_count: int = field(init=False)

    def __post_init__(self):
        self.step_count = len(self.states) - 1


def covariance_sqrt(C: np.ndarray) -> np.ndarray:
    """Return ``L`` with ``L L^T = C``.

    Cholesky when C is PD; otherwise an eigendecomposition square root with
    eigenvalues above ``-EPS_PSD`` clamped to zero, so Q = 0 and low-rank Q work.
    """
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(C)
        if w[0] < -EPS_PSD * max(1.0, abs(w[-1])):
            raise ValueError("covariance is not positive semidefinite") from None
        return V * np.sqrt(np.clip(w, 0.0, None))


def sample_gaussian(C: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Zero-mean Gaussian draws with covariance ``C`` (one per row if ``size``)."""
    L = covariance_sqrt(C)
    if size is None:
        return L @ rng.standard_normal(C.shape[0])
    return rng.standard_normal((size, C.shape[0])) @ L.T


def step_truth(sys: LinearSystem, x: np.ndarray, rng: np.random.Generator, noise: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"state must have length {sys.n}, got shape {x.shape}")
    out = sys.A @ x
    if noise and noise_enabled():
        out = out + sample_gaussian(sys.Q, rng)
    return out


def measure(sensor: SensorModel, x: np.ndarray, rng: np.random.Generator, noise: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (sensor.n,):
        raise ValueError(f"state must have length {sensor.n}, got shape {x.shape}")
    z = sensor.H @ x
    if noise and noise_enabled():
        z = z + sample_gaussian(sensor.R, rng)
    return z


def simulate_trajectory(
    sys: LinearSystem, x0: np.ndarray, steps: int, rng: np.random.Generator, noise: bool = True
) -> Trajectory:
    states = np.empty((steps + 1, sys.n))
    states[0] = x0
    for k in range(steps):
        states[k + 1] = step_truth(sys, states[k], rng, noise=noise)
    return Trajectory(states)


def turn_matrix(w_p: float, T: float, variant: str = "standard") -> np.ndarray:
    """State transition of a planar particle turning at ``w_p`` rad/s, state (x, y, vx, vy).

    ``variant="standard"`` is the exact coordinated-turn discretisation.
    ``variant="paper"`` reproduces the matrix exactly as printed in the source
    experiment (unscaled position couplings, symmetric velocity block); the
    stray factor in its (2, 3) entry is read as 1.
    """
    wT = w_p * T
    c, s = np.cos(wT), np.sin(wT)
    if variant == "paper":
        return np.array(
            [
                [1.0, 0.0, s, c - 1.0],
                [0.0, 1.0, 1.0 - c, s],
                [0.0, 0.0, c, s],
                [0.0, 0.0, s, c],
            ]
        )
    if variant != "standard":
        raise ValueError(f"unknown turn-matrix variant {variant!r}")
    if w_p == 0.0:
        a, b = T, 0.0
    else:
        a, b = s / w_p, (1.0 - c) / w_p
    return np.array(
        [
            [1.0, 0.0, a, -b],
            [0.0, 1.0, b, a],
            [0.0, 0.0, c, -s],
            [0.0, 0.0, s, c],
        ]
    )


def build_turn_system(w_p: float = 0.5, T: float = 0.1, q: float = 2e-6, variant: str = "standard") -> LinearSystem:
    if T <= 0:
        raise ValueError("sample period T must be positive")
    if q < 0:
        raise ValueError("process-noise scale q must be nonnegative")
    return LinearSystem(turn_matrix(w_p, T, variant), q * np.eye(4))
