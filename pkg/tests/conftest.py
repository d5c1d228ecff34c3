import pytest

_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def criterion():
    """``criterion(name, ok, detail)`` records one acceptance line, then asserts ``ok``."""
    def check(name, ok, detail):
        ok = bool(ok)
        _RESULTS.append((name, ok, detail))
        print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return check


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
