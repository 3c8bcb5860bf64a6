"""Collects one-line verdicts from the acceptance suite and prints them at the end."""

CRITERIA = []


def record(cid: str, ok: bool, detail: str) -> None:
    CRITERIA.append(f"{cid} {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
