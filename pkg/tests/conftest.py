"""Shared pytest wiring: a per-criterion PASS/FAIL summary for the acceptance suite."""

import pytest


def pytest_configure(config):
    config._criterion_lines = []


@pytest.fixture
def criterion(request):
    """Record one summary line for an acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = "criterion %2d: %s  %s" % (number, "PASS" if ok else "FAIL", detail)
        request.config._criterion_lines.append((number, line))
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
