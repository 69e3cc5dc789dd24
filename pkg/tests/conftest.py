import numpy as np
import pytest

from mpcrl.config import load_config
from mpcrl.envelope import Envelope
from mpcrl.mpc import MpcConfig
from mpcrl.plant import default_params


@pytest.fixture(scope="session")
def params():
    return default_params()


@pytest.fixture(scope="session")
def envelope():
    return load_config().envelope()


@pytest.fixture(scope="session")
def mpc_cfg():
    return load_config().mpc_config()


@pytest.fixture(scope="session")
def default_config():
    return load_config()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_config():
    """2 bins per dimension, one gust realization per state."""
    return load_config(overrides=[
        {"grid": {"bins": 2, "n_per_dim": 2}},
        {"gust": {"n_realizations": 1}},
        {"evaluation": {"n_runs": 2}},
    ])


@pytest.fixture(scope="session")
def tiny_policy(tiny_config):
    return tiny_config.policy().fit(tiny_config.training_states())


def unit_envelope():
    return Envelope(-np.ones(5), np.ones(5), -1.0, 1.0)


def sample_states(env, n, rng, fraction=1.0):
    lo, hi = env.inner(fraction)
    return rng.uniform(lo, hi, (n, 5))


_CRITERIA_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record a one-line pass/fail verdict for the acceptance summary."""
    lines = request.config.stash.setdefault(_CRITERIA_KEY, [])

    def report(number, title, passed, detail):
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip("ab"))):
            terminalreporter.write_line(line)
