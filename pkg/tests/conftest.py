import pytest

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, {})

    def report(n: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d}  {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        lines[n] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
