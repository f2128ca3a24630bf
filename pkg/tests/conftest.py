from acceptance_log import RESULTS


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, extra in RESULTS:
        terminalreporter.write_line(f"{status} {label} {extra}".rstrip())
