import pytest

# filled by tests/test_acceptance.py: (number, title, passed, detail)
ACCEPTANCE_LINES: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {num} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")


@pytest.fixture
def record_criterion():
    def record(num, title, ok, detail):
        line = (num, title, bool(ok), detail)
        ACCEPTANCE_LINES.append(line)
        print(f"criterion {num} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        return ok

    return record
