import os
import re
import sys

# make the shared oracle module importable from every test file
sys.path.insert(0, os.path.dirname(__file__))

import acceptance_log  # noqa: E402

_CRITERION = re.compile(r"test_acceptance\.py::test_c(\d+)_")


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    number = int(match.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        acceptance_log.OUTCOMES[number] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance_log.OUTCOMES):
        outcome = acceptance_log.OUTCOMES[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        detail = acceptance_log.DETAILS.get(number, "")
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}".rstrip())
