"""Shared test plumbing: the acceptance verdict table printed at session end."""

VERDICTS = []


def record_verdict(line: str) -> None:
    """Collect one criterion verdict line for the terminal summary."""
    VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
