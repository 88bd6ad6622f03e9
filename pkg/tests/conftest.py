"""Shared fixtures.

Every conditioning report produced in this process is recorded, and each
test checks that the reports it produced have ``sigma >= 1``: the maximum of
``||y(t)||`` over the interval can never be below its mean.
"""


import pytest

from stiffkit import conditioning as cond

REPORTS = []

_maximize_sigma = cond.maximize_sigma
_oscillatory_report = cond.oscillatory_report


def _recording(fn):
    def wrapper(*args, **kwargs):
        report = fn(*args, **kwargs)
        REPORTS.append(report)
        return report

    wrapper.__wrapped__ = fn
    return wrapper


cond.maximize_sigma = _recording(_maximize_sigma)
cond.oscillatory_report = _recording(_oscillatory_report)


@pytest.fixture(autouse=True)
def sigma_at_least_one():
    start = len(REPORTS)
    yield
    for report in REPORTS[start:]:
        assert report.sigma >= 1.0 - 1e-12, report.to_text()


# Acceptance verdicts, filled by tests/test_acceptance.py and printed as one
# line per criterion at the end of the run.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}")
