"""Prints the acceptance verdicts as one line per criterion at the end of the run."""

VERDICTS: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    VERDICTS[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
