import numpy as np
import pytest
import torch

from wsag.backends import MockBackend
from wsag.data import generate_fixture


@pytest.fixture(scope="session")
def fixture_data():
    """Default synthetic dataset: 4 objects x 2 affordances, 6 ego / 6 exo / 3 test each."""
    return generate_fixture(seed=0)


@pytest.fixture(scope="session")
def index(fixture_data):
    return fixture_data[0]


@pytest.fixture(scope="session")
def mapping(fixture_data):
    return fixture_data[1]


@pytest.fixture(scope="session")
def mock(index):
    return MockBackend.from_index(index)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the assertion itself stays in the test."""

    def record(number, title, ok, detail=""):
        line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
