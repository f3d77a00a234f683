import pytest

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class Recorder:
    def __call__(self, number: int, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)


@pytest.fixture
def record():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
