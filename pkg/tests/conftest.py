import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdicts():
    """Collects one summary line per acceptance criterion, printed at the end of the run."""
    return _LINES


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
