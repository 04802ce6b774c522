from __future__ import annotations

import pytest

_VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the verdict of one numbered acceptance criterion."""

    def record(number: int, ok: bool, summary: str) -> bool:
        _VERDICTS[number] = (bool(ok), summary)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, summary = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {summary}")
