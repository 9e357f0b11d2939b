import numpy as np
import pytest

from samle.models import DriftedBrownianModel, LogisticGrowthModel, ParameterBox


@pytest.fixture
def logistic():
    return LogisticGrowthModel()


@pytest.fixture
def bm():
    return DriftedBrownianModel()


@pytest.fixture
def box4():
    return ParameterBox.from_pairs([(0.03, 0.18), (850.0, 1200.0), (0.09, 0.12)])


@pytest.fixture
def theta0():
    return np.array([0.1, 1000.0, 0.1])


def pytest_terminal_summary(terminalreporter):
    lines = [
        value
        for rep in terminalreporter.getreports("passed") + terminalreporter.getreports("failed")
        for key, value in getattr(rep, "user_properties", [])
        if key == "acceptance" and rep.when == "call"
    ]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
