import pytest

_ACCEPTANCE: list[tuple[int, bool, str]] = []


class Recorder:
    def __call__(self, criterion: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        return bool(passed)


@pytest.fixture
def acceptance():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"AC{criterion} {'PASS' if passed else 'FAIL'}  {detail}")
