"""Acceptance bookkeeping: one PASS/FAIL line per criterion at the end.

Tests marked ``@pytest.mark.acceptance("<criterion>")`` contribute to the
named criterion; it passes only if every contributing test passed. The
summary always lists all criteria, so a collection or setup failure shows
up as FAIL rather than silence.
"""

import pytest

CRITERIA = (
    "convergence reproduction",
    "bulk conductivity",
    "conservation and grounding",
    "extracellular field scale",
    "framework comparison",
    "ephaptic qualitative suite",
    "membrane identities",
    "verification oracle equivalence",
)

_results = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "acceptance(name): test contributes to the named acceptance "
        "criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call":
        ok = report.passed
    elif report.failed:  # setup/teardown blew up
        ok = False
    else:
        return
    _results[name] = _results.get(name, True) and ok


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name in CRITERIA:
        if name in _results:
            verdict = "PASS" if _results[name] else "FAIL"
        else:
            verdict = "FAIL (not run)"
        tr.write_line(f"[acceptance] {name}: {verdict}")
