import numpy as np
import pytest

from pointlm import tensor as T


@pytest.fixture(autouse=True)
def float64_default():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
