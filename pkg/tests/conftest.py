import warnings

import pytest

warnings.filterwarnings("ignore", message=".*TBB.*")

from mprsens.market import build_binomial, build_trinomial  # noqa: E402
from mprsens.preferences import log_utility, mixed_power_utility, power_utility  # noqa: E402

ACCEPTANCE_LINES = []

LAMBDA_STATE = {"const": 2.0, "state": 3.0}
NU_STATE = {"const": 1.0, "state": 5.0}


def record_criterion(number, title, ok, detail=""):
    ACCEPTANCE_LINES.append((number, title, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{number:>2}] {title}  {detail}")


@pytest.fixture(scope="session")
def standard_tree():
    """4-step binomial, sigma=0.2, dt=0.25, lambda=2, nu=1."""
    return build_binomial(4, 0.25, 0.2, 2.0, 1.0)


@pytest.fixture(scope="session")
def one_period():
    """dM = +-0.1, qv = 0.01, lambda = 2, nu = 1."""
    return build_binomial(1, 1.0, 0.1, 2.0, 1.0)


@pytest.fixture(scope="session")
def mixed_binomial():
    return build_binomial(3, 0.25, 0.2, LAMBDA_STATE, NU_STATE)


@pytest.fixture(scope="session")
def mixed_trinomial():
    return build_trinomial(2, 0.25, 0.2, LAMBDA_STATE, NU_STATE)


@pytest.fixture(scope="session")
def power():
    return power_utility(0.5)


@pytest.fixture(scope="session")
def mixed():
    return mixed_power_utility([0.3, 0.7])


@pytest.fixture(scope="session")
def log_u():
    return log_utility()
