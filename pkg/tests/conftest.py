import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from verblob.cluster import SimCluster  # noqa: E402

PAGE = 4096

# acceptance results, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def cluster():
    with SimCluster(4, 4, seed=7) as c:
        yield c


@pytest.fixture
def client(cluster):
    return cluster.client(seed=11)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
