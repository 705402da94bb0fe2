import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fockdamp.numkernel import CavityParams, build_generator
from fockdamp.trajsim import ProbeModel, synthesize_run

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def probe():
    return ProbeModel()


@pytest.fixture(scope="session")
def planted_params():
    return CavityParams()


@pytest.fixture(scope="session")
def planted_K(planted_params):
    return build_generator(planted_params)


@pytest.fixture(scope="session")
def small_run(planted_params, probe):
    return synthesize_run(planted_params, probe, 4.4, 0.2, 30, seed=7)


def random_generator(rng, D, scale=5.0):
    K = rng.exponential(scale, size=(D, D))
    K[np.diag_indices(D)] = 0.0
    K[np.diag_indices(D)] = -K.sum(axis=0)
    return K


_CRITERIA = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Store one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
