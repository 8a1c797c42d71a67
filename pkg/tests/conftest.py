import pytest

_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_KEY] = []


@pytest.fixture(scope="session")
def criterion(request):
    """``criterion(n, title, ok, detail)`` records one acceptance line and asserts ``ok``."""
    lines = request.config.stash[_KEY]

    def record(n, title, ok, detail=""):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {title}" + (f" ({detail})" if detail else "")
        lines.append((n, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines, key=lambda t: t[0]):
            terminalreporter.write_line(line)
