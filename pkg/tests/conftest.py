import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def linear_gaussian(rng, n, noise_std=0.1):
    """s' = 0.9 s + 0.1 a + N(0, noise_std^2), scalar state and action."""
    s = rng.uniform(-1.0, 1.0, (n, 1))
    a = rng.uniform(-1.0, 1.0, (n, 1))
    s2 = 0.9 * s + 0.1 * a + noise_std * rng.standard_normal((n, 1))
    return s, a, s2


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
