import sys


def pytest_terminal_summary(terminalreporter):
    for mod in list(sys.modules.values()):
        lines = getattr(mod, "ACCEPTANCE_LINES", None)
        if lines:
            terminalreporter.section("acceptance criteria")
            for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
                terminalreporter.write_line(line)
