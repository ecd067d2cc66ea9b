import sys

import numpy as np
import pytest

from boussinesq_lab.spectral import PhysicsParams, random_state


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # verdict lines collected by the acceptance checks; printed here because
    # the run-wide summary writer is never captured
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None) if mod else None
    if lines:
        terminalreporter.section("acceptance verdicts")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def params():
    return PhysicsParams()


@pytest.fixture
def rng():
    return np.random.default_rng(20260818)


@pytest.fixture
def small_state(rng):
    return random_state(32, rng)
