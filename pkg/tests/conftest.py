import logging

import numpy as np
import pytest

from adaptinf import env


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("adaptinf").setLevel(logging.ERROR)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_pool():
    return env.synthetic_pool(200, 3, seed=3)


def random_pd(rng, d, jitter=0.1):
    a = rng.standard_normal((d, d))
    return a @ a.T + jitter * np.eye(d)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance_report(request):
    """Record ``(criterion, passed, detail)`` for the end-of-run summary."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def report(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
