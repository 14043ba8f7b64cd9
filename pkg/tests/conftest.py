import pytest

_LINES = []


class Report:
    def __init__(self, lines):
        self.lines = lines

    def __call__(self, criterion, ok, detail=""):
        line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        self.lines.append(line)
        print(line)
        return ok


@pytest.fixture(scope="session")
def report():
    return Report(_LINES)


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
