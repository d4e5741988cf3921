import numpy as np
import pytest

from covadapt.nn import RngStream


@pytest.fixture
def rng():
    return RngStream(1234)


def np_rng(seed=0):
    return np.random.default_rng(seed)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
