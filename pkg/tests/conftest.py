import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


class CriterionRecorder:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []
        _CRITERIA[number] = (title, False, "did not finish")

    def note(self, text: str) -> None:
        self.details.append(text)

    def check(self, ok: bool, text: str) -> None:
        self.details.append(("ok: " if ok else "FAILED: ") + text)
        if not ok:
            _CRITERIA[self.number] = (self.title, False, "; ".join(self.details))
            raise AssertionError(text)

    def done(self) -> None:
        _CRITERIA[self.number] = (self.title, True, "; ".join(self.details))


@pytest.fixture
def criterion():
    return CriterionRecorder


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title} -- {detail}")
