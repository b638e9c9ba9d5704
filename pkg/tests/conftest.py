from __future__ import annotations

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_outcomes: dict[tuple[int, str], str] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2).replace("_", " "))
    if report.failed:
        _outcomes[key] = "FAIL"
    elif report.when == "call" and key not in _outcomes:
        _outcomes[key] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (n, name), status in sorted(_outcomes.items()):
        terminalreporter.write_line(f"ACCEPTANCE {n} {name}: {status}")
