import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import criteria  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if criteria.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in criteria.RESULTS:
            terminalreporter.write_line(line)
