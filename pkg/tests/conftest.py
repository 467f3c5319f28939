import pytest

_CRITERIA = []


class CriterionLog:
    def __call__(self, cid: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] {cid}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok


@pytest.fixture
def criterion():
    """Record one acceptance line; returns whether it passed."""
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
