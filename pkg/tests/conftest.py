import pytest

# criterion label -> (passed or None when not run, detail); filled in by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def report():
    def record(number, passed, detail):
        ACCEPTANCE[number] = (None if passed is None else bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        status = "NOT RUN" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
