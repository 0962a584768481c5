from __future__ import annotations

import numpy as np
import pytest

from vortexsim.core import ParticleEnsemble, lattice

ACCEPTANCE_LINES: dict[int, str] = {}


def rankine_ensemble(n_target: int, box=(-1.0, -1.0, 1.0, 1.0), factor: float = 2.0) -> ParticleEnsemble:
    xs, ys, h = lattice(box, n_target)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    inside = X**2 + Y**2 <= 1.0
    pos = np.column_stack([X[inside], Y[inside]])
    return ParticleEnsemble(pos, np.full(len(pos), h * h), factor * h)


@pytest.fixture(scope="session")
def rankine_small() -> ParticleEnsemble:
    return rankine_ensemble(2500)


@pytest.fixture(scope="session")
def rankine_10k() -> ParticleEnsemble:
    return rankine_ensemble(10_000)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
