import pytest

RESULTS = []


@pytest.fixture
def report():
    def add(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} {name}" + (f"  {detail}" if detail else "")
        RESULTS.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
