import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    def record(number: int, ok: bool, detail: str):
        _VERDICTS.append((number, "PASS" if ok else "FAIL", detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, flag, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"{flag} criterion {number}: {detail}")
