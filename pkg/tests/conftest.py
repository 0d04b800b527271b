import sys

import numpy as np
import pytest

from gfdmcr.config import GfdmConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def default_config():
    return GfdmConfig()


@pytest.fixture(scope="session")
def small_config():
    return GfdmConfig(K=8, M=3)


@pytest.fixture(scope="session")
def ofdm_config():
    return GfdmConfig.ofdm()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.REPORT):
        terminalreporter.write_line(mod.REPORT[n])
