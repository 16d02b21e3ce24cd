import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from patchattr.core import Dataset, build_schedule  # noqa: E402


@pytest.fixture(scope="session")
def schedule():
    return build_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_dataset(rng, n, C=3, L=8, prefix=None):
    ids = None if prefix is None else [f"{prefix}{i}" for i in range(n)]
    return Dataset(rng.uniform(-1, 1, (n, C, L, L)), ids)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
