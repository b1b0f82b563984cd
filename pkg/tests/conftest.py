import numpy as np
import pytest

from litedet import Tensor4

ACCEPTANCE_LINES = []


def rand_tensor(rng, shape, scale=1.0):
    return Tensor4((rng.standard_normal(shape) * scale).astype(np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
