import _report


def pytest_terminal_summary(terminalreporter):
    if _report.RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_report.RESULTS):
            terminalreporter.write_line(_report.RESULTS[key])
