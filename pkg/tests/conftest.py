import pytest

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def verdict():
    """Record one PASS/FAIL/SKIP line for an acceptance criterion, then assert."""
    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line
    record.skip = lambda number, title, why: ACCEPTANCE_LINES.__setitem__(number, f"SKIP [{number}] {title}: {why}")
    return record
