"""Shared pytest hooks: acceptance criteria print one summary line each."""
import pytest

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    def record(number: int, passed: bool, detail: str, label: str | None = None) -> None:
        status = label or ("PASS" if passed else "FAIL")
        line = f"criterion {number:>2}: {status:<9} {detail}"
        ACCEPTANCE[number] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
