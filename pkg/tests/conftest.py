import pytest

# acceptance verdicts, printed after the run
VERDICTS = []


@pytest.fixture
def verdict():
    def record(number, passed, detail):
        VERDICTS.append(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)
