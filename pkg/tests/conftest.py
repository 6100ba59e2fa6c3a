import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nonignorable.simlab import generate, get_design

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# filled by tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def design_a():
    return get_design("A")


@pytest.fixture(scope="session")
def sample_a(design_a):
    return generate(design_a, 400, 123)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
