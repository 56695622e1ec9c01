import numpy as np
import pytest

from biresnet.motorsim import MachineParams, SimConfig


def pytest_addoption(parser):
    parser.addoption("--skip-slow", action="store_true", help="skip long training/simulation tests")


def pytest_collection_modifyitems(config, items):
    if not config.getoption("--skip-slow"):
        return
    skip = pytest.mark.skip(reason="--skip-slow given")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def machine():
    return MachineParams()


@pytest.fixture(scope="session")
def short_sim():
    # 0.3 s records keep simulation-heavy unit tests fast
    return SimConfig(duration=0.3)


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record ``(criterion, passed, detail)``; the lines are printed in the terminal summary."""
    def record(number, passed, detail):
        _ACCEPTANCE[number] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
