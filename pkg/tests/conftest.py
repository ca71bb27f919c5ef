"""Collects one verdict line per acceptance criterion and prints them at the end of the run."""

import pytest

VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Call ``verdict(n, ok, detail)`` to record criterion ``n``."""

    def record(n, ok, detail=""):
        VERDICTS[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
