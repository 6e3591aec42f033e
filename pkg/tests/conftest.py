"""Collects acceptance outcomes and prints them as one line per criterion."""

RESULTS = {}


def record(number, title, passed, detail=""):
    RESULTS[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        title, passed, detail = RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
