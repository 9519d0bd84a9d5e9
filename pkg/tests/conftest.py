import os
import warnings

import numpy as np
import pytest

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
warnings.filterwarnings("ignore", message=".*TBB.*")

ACCEPTANCE_LINES = []


def gen(seed):
    return np.random.Generator(np.random.Philox(seed))


@pytest.fixture
def rng():
    return gen(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
