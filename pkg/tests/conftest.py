import functools

import pytest

from loadbus_dse.simulator import Scenario, simulate
from loadbus_dse.waveform import window

R_TRUE = 7.373
L_TRUE = 9.779e-3
RF_LG = 0.015
RF_LL = 0.010


def rf_for(hypothesis: str):
    if hypothesis == "unfaulted":
        return None
    return RF_LG if hypothesis.startswith("lg") else RF_LL


@functools.lru_cache(maxsize=None)
def simulated(topology: str, hypothesis: str, **overrides):
    """Simulated run with the reference load, cached across the session."""
    s = Scenario(topology, R_TRUE, L_TRUE, hypothesis, rf_for(hypothesis), **overrides)
    return simulate(s)


def analysis_window(topology: str, hypothesis: str, t0=0.3, t1=0.35, **overrides):
    ws, _ = simulated(topology, hypothesis, **overrides)
    return window(ws, t0, t1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment")


@pytest.fixture(scope="session")
def wye_lg_window():
    return analysis_window("wye", "lg-a")


# one (status, criterion, detail) tuple per acceptance criterion, printed at session end
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for status, name, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{status} {name}: {detail}")
