import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdict lines after capture has ended."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE_VERDICTS", None) if module else None
    if lines:
        terminalreporter.section("acceptance verdicts")
        for line in lines:
            terminalreporter.write_line(line)
