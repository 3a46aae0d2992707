CRITERIA: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
