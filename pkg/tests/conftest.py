"""Shared test plumbing: acceptance-criterion result collection."""

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: int, passed: bool, detail: str) -> None:
    """Log one pass/fail line per acceptance criterion (shown in the summary)."""
    line = f"ACCEPTANCE {criterion:02d} {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
