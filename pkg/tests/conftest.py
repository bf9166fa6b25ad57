import pytest

CRITERIA: dict[str, str] = {}


@pytest.fixture
def report_criterion():
    """Record one status line per acceptance criterion for the terminal summary."""

    def record(key: str, passed: bool, detail: str) -> None:
        CRITERIA[key] = f"{'PASS' if passed else 'FAIL'}  {key}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    def order(key: str) -> tuple[int, str]:
        digits = key.rstrip("abcdefghijklmnopqrstuvwxyz")
        return int(digits), key[len(digits):]

    for key in sorted(CRITERIA, key=order):
        terminalreporter.write_line(CRITERIA[key])
