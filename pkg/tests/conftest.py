"""Shared test plumbing: the acceptance criterion report."""

RESULTS = {}


def record(criterion: int, passed: bool, detail: str, variant: str = "") -> None:
    RESULTS[(criterion, variant)] = (passed, detail)
    tag = f"{criterion}{' ' + variant if variant else ''}"
    print(f"criterion {tag}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (key, variant) in sorted(RESULTS):
        passed, detail = RESULTS[(key, variant)]
        tag = f"{key:2d}{' ' + variant if variant else ''}"
        terminalreporter.write_line(f"criterion {tag}: {'PASS' if passed else 'FAIL'}  {detail}")
