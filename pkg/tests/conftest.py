import pytest

_LINES = {}


@pytest.fixture(scope="session")
def criterion_report():
    """Record and print one pass/fail line per acceptance criterion."""

    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES[number] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_LINES, key=str):
            terminalreporter.write_line(_LINES[key])
