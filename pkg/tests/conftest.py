"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""

import pytest

_RESULTS: dict[int, tuple[str, bool, str]] = {}


class CriterionRecorder:
    def __call__(self, number: int, title: str, passed: bool, detail: str) -> None:
        _RESULTS[number] = (title, passed, detail)
        print(_line(number, title, passed, detail))


def _line(number, title, passed, detail):
    return f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {title} ({detail})"


@pytest.fixture(scope="session")
def criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        terminalreporter.write_line(_line(number, *_RESULTS[number]))
