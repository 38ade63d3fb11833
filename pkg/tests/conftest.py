"""Per-criterion PASS/FAIL reporting for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(n)`` are grouped by ``n``; a criterion
passes when every test tagged with it passed.  One line per criterion is
printed at the end of the run.
"""

_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    ok = _RESULTS.setdefault(crit, True)
    if report.failed or (report.when == "call" and report.skipped):
        _RESULTS[crit] = False
    elif report.when == "call":
        _RESULTS[crit] = ok and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_RESULTS):
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if _RESULTS[crit] else 'FAIL'}")
