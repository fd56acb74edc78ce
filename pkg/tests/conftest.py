import pytest

_GATE: dict[int, tuple[bool | None, str]] = {}


@pytest.fixture
def gate():
    """Record one acceptance verdict: ``gate(n, ok, detail)``; ok=None marks a skip."""

    def record(number: int, ok: bool | None, detail: str) -> None:
        _GATE[number] = (ok, detail)
        print(f"criterion {number}: {_label(ok)} {detail}")

    return record


def _label(ok):
    return "SKIP" if ok is None else ("PASS" if ok else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _GATE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_GATE):
        ok, detail = _GATE[number]
        terminalreporter.write_line(f"[{_label(ok)}] criterion {number}: {detail}")
