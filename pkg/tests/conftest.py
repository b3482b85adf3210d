import pytest

ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one acceptance line; it is printed in the terminal summary."""

    def _report(number, name, ok, detail=""):
        ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {name}  {detail}".rstrip())
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
