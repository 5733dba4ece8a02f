"""Every acceptance criterion at full parameters.

Each test prints one PASS/FAIL line; the lines are repeated in the terminal
summary.  The whole module takes roughly fifteen minutes.
"""

import time

import pytest

from push0.harness.verify import CRITERIA, criterion_line

import conftest


@pytest.mark.parametrize("label,fn", CRITERIA, ids=[fn.__name__ for _, fn in CRITERIA])
def test_criterion(label, fn):
    t0 = time.monotonic()
    report = fn()
    report.duration = time.monotonic() - t0
    line = criterion_line(label, report)
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert report.passed, line
