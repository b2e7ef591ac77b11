"""Prints the acceptance-gate verdict lines after a run that includes them."""

_GATE: dict[str, tuple] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(num, title): acceptance gate check")


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker:
            _GATE[item.nodeid] = marker.args


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for bucket, verdict in (("failed", "FAIL"), ("error", "FAIL"), ("passed", "PASS")):
        for report in terminalreporter.stats.get(bucket, []):
            key = _GATE.get(report.nodeid)
            if key is not None:
                # a setup error and a call failure both count as FAIL
                verdicts.setdefault(key, verdict)
    if not verdicts:
        return
    terminalreporter.section("acceptance gate")
    for (num, title), verdict in sorted(verdicts.items()):
        terminalreporter.write_line(f"criterion {num} ({title}): {verdict}")
