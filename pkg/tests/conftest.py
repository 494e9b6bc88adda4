"""Shared pytest hooks.

The acceptance tests record one verdict line per criterion through the
``criterion`` fixture.  The lines are replayed in a dedicated section after
the run so they stay visible regardless of output capture settings.
"""

import pytest

_VERDICTS = []


@pytest.fixture
def criterion():
    """Record a single acceptance verdict line and assert that it passed."""

    def record(number, name, ok, detail):
        line = "criterion %2d %-34s %s  %s" % (
            number, name, "PASS" if ok else "FAIL", detail)
        _VERDICTS.append((number, line))
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)
