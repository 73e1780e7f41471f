import numpy as np
import pytest

from siag import available_backends
from siag.problem import ProblemSpec, generate_instance

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(params=available_backends())
def backend(request):
    return request.param


@pytest.fixture
def default_spec():
    return ProblemSpec(n=10, d=20, p=10, noise_std=0.1, master_seed=1)


@pytest.fixture
def small_instance():
    return generate_instance(ProblemSpec(n=4, d=3, p=2, noise_std=0.3, master_seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
