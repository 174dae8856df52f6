import warnings

import numpy as np
import pytest
from hypothesis import settings

from intervalmpc.model import Box, Envelope, ParametricLinearSystem, SignalBounds

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def scalar_sys():
    """dx/dt = -theta x + u + w with theta in [1, 2]."""
    return ParametricLinearSystem([[0.0]], [[[-1.0]]], [[1.0]], [[1.0]], Box([1.0], [2.0]))


@pytest.fixture
def scalar_bounds():
    return SignalBounds(Envelope.constant([-0.05], [0.05]), Envelope.zero(2), [-0.1], [0.1])


@pytest.fixture(autouse=True)
def _quiet_solver_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*Solution may be inaccurate.*")
        yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
