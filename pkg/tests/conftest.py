import numpy as np
import pytest

from tauflow.tensor import Tensor


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
