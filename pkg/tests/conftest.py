import pytest

_LINES_KEY = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance line: ``report(name, passed, detail, seconds)``."""
    lines = request.config.stash.setdefault(_LINES_KEY, [])

    def add(name, passed, detail, seconds):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail} [{seconds:.1f} s]"
        lines.append(line)
        print(line)

    return add


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
