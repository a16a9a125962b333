import pytest


class AcceptanceLog:
    def __init__(self):
        self.lines = {}

    def record(self, number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {title}"
        if detail:
            line += f"  [{detail}]"
        self.lines[number] = line
        print(line)
        return ok


_LOG = AcceptanceLog()


@pytest.fixture(scope="session")
def acceptance():
    return _LOG


def pytest_terminal_summary(terminalreporter):
    if _LOG.lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LOG.lines):
            terminalreporter.write_line(_LOG.lines[n])
