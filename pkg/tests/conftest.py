"""Shared test plumbing: per-criterion pass/fail lines for the acceptance suite.

Acceptance tests are named test_criterion_<NN>_<slug>. Their outcomes are
collected here and echoed as one line per criterion after the run, so the
result of each contract is visible without digging through the node list.
Tests may put a short human-readable summary into DETAILS[<NN>].
"""

import re

DETAILS = {}

_TITLES = {}
_RESULTS = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    num, slug = int(m.group(1)), m.group(2).replace("_", " ")
    _TITLES[num] = slug
    if report.when == "call":
        _RESULTS[num] = report.passed
    elif report.failed:  # setup/teardown error
        _RESULTS[num] = False
    elif report.when == "setup" and report.skipped:
        _RESULTS[num] = None


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for num in sorted(_RESULTS):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[_RESULTS[num]]
        line = f"CRITERION {num:2d}: {status} - {_TITLES[num]}"
        detail = DETAILS.get(num)
        if detail:
            line += f" ({detail})"
        tr.write_line(line, green=_RESULTS[num] is True,
                      red=_RESULTS[num] is False)
