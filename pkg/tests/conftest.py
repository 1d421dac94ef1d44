import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record the one-line verdict of an acceptance criterion."""
    store = request.config.stash.setdefault(_LINES, {})

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        store[number] = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        print(store[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
