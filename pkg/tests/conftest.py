"""Shared fixtures and the acceptance summary printed after the test run."""

import re

import pytest

_NOTES = {}
_OUTCOMES = {}
_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the current acceptance criterion."""

    def record(text):
        _NOTES[request.node.nodeid] = text

    return record


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        passed = report.outcome == "passed"
        _OUTCOMES[report.nodeid] = (int(match.group(1)), match.group(2), passed, getattr(report, "wasxfail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (num, name, passed, xfail_reason) in sorted(_OUTCOMES.items(), key=lambda kv: kv[1][0]):
        line = f"criterion {num:2d} {name}: {'PASS' if passed else 'FAIL'}"
        if nodeid in _NOTES:
            line += f" -- {_NOTES[nodeid]}"
        if xfail_reason:
            line += f" [expected failure: {xfail_reason}]"
        terminalreporter.write_line(line)
