import sys

import numpy as np
import pytest

from dpselft import nn


def small_model(seed=0, dims=(3, 4, 2), act=True):
    """dense -> tanh -> dense chain over ``dims``."""
    specs = []
    for i in range(len(dims) - 1):
        specs.append(nn.dense(dims[i], dims[i + 1]))
        if act and i < len(dims) - 2:
            specs.append(nn.tanh(dims[i + 1]))
    return nn.build_model(specs, seed)


def toy_data(n, dim, K, seed=0):
    rng = np.random.default_rng(seed)
    return nn.Dataset(rng.standard_normal((n, dim)), rng.integers(0, K, size=n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.report_lines():
        terminalreporter.write_line(line)
