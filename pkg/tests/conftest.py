import pytest

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(ok, detail)``; failing asserts still record FAIL."""
    name = request.node.name
    recorded = []

    def record(ok: bool, detail: str = "") -> None:
        recorded.append(True)
        _ACCEPTANCE.append((name, bool(ok), detail))
        assert ok, detail

    yield record
    if not recorded:
        _ACCEPTANCE.append((name, False, "did not report"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
