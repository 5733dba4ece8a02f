import logging

import pytest

from push0.bus import Bus

# Criterion lines collected by test_acceptance.py, printed after the run.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def bus():
    b = Bus()
    yield b
    b.close()


@pytest.fixture(autouse=True)
def _quiet_bus_logs(caplog):
    caplog.set_level(logging.ERROR, logger="push0")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
