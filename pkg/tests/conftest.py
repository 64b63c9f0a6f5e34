import re
import sys

_outcomes: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training check")


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_(\d+)_", report.nodeid)
    if m and (report.when == "call" or report.outcome != "passed"):
        _outcomes.setdefault(int(m.group(1)), report.outcome)
        if report.outcome != "passed":
            _outcomes[int(m.group(1))] = report.outcome


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", {})
    numbers = sorted(set(results) | set(_outcomes))
    if not numbers:
        return
    terminalreporter.section("acceptance criteria")
    for n in numbers:
        # a test that raised before reaching its verdict has no line of its own
        terminalreporter.write_line(results.get(n) or f"acceptance {n}: FAIL  ({_outcomes[n]} before a verdict)")
