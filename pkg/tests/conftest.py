from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

ACCEPTANCE_LINES: list[str] = []


def random_pd(rng: np.random.Generator, n: int, floor: float = 0.1) -> np.ndarray:
    B = rng.standard_normal((n, n))
    return B @ B.T + floor * np.eye(n)


@st.composite
def pd_matrices(draw, n: int, p: int | None = None, max_p: int = 5):
    """A (p, n, n) stack of well-conditioned random PD matrices."""
    p = p if p is not None else draw(st.integers(1, max_p))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    scale = draw(st.floats(0.05, 20.0))
    return np.array([scale * random_pd(rng, n) for _ in range(p)])


@pytest.fixture
def acceptance_report():
    def report(criterion: str, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
        print(ACCEPTANCE_LINES[-1])

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
