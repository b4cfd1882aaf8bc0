import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria_results = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance.*test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    num = int(m.group(1))
    if report.when == "call":
        outcome = {"passed": "PASS", "failed": "FAIL",
                   "skipped": "SKIP"}.get(report.outcome, report.outcome)
        # parametrized criteria: any failure marks the criterion failed
        prev = _criteria_results.get(num)
        if prev != "FAIL":
            _criteria_results[num] = outcome
    elif report.when == "setup" and report.outcome == "skipped":
        _criteria_results.setdefault(num, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _criteria_results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria_results):
        terminalreporter.write_line(
            f"{_criteria_results[num]} criterion {num}")
