import pytest

_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record ``CRITERION n: PASS/FAIL`` for the terminal summary and return the flag."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
