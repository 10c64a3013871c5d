from __future__ import annotations

import pytest

VERDICTS: list[str] = []


@pytest.fixture()
def verdict():
    """Record and print one PASS/FAIL line, then fail the test if needed."""

    def emit(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        VERDICTS.append(line)
        print(line)
        assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in sorted(VERDICTS, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
