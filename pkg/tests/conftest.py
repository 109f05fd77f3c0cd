import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(name, passed, detail)``."""
    def record(name: str, passed: bool, detail: str = "") -> bool:
        line = f"ACCEPTANCE {name}: {'PASS' if passed else 'FAIL'}" + (f" ({detail})" if detail else "")
        _LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
