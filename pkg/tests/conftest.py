import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from posadapt.ssp import convert, example_instance

settings.register_profile(
    "repo", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("repo")

# printed in the worked example
PRINTED_A = np.array([[0.4, 0.0, 0.0], [0.0, 0.6, 0.0], [0.4, 0.4, 0.4]])
PRINTED_B = np.array([[-0.4, 0.3, 0.0, 0.2],
                    [0.4, -0.6, -0.5, 0.2],
                    [0.0, 0.3, 0.0, -0.4]])
# exact optimum of the converted instance, from the linear system of gain (0, 2, 0)
P_STAR = np.array([25 / 6, 10 / 3, 5 / 2])


@pytest.fixture
def ssp3():
    return example_instance()


@pytest.fixture
def example_problem():
    return convert(example_instance())


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[num])
