"""Collects acceptance-criterion outcomes and prints one line per criterion."""
from collections import defaultdict

import pytest

_RESULTS = defaultdict(list)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        crit = str(marker.args[0])
        part = marker.args[1] if len(marker.args) > 1 else None
        details = [str(v) for k, v in item.user_properties if k == "detail"]
        _RESULTS[crit].append((part, report.passed, details))


def _key(crit):
    return int(crit) if crit.isdigit() else crit


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(_RESULTS, key=_key):
        entries = _RESULTS[crit]
        ok = all(passed for _, passed, _ in entries)
        parts = [f"{part} {'PASS' if passed else 'FAIL'}" for part, passed, _ in entries if part]
        details = [d for _, _, ds in entries for d in ds]
        line = f"criterion {crit:>2}: {'PASS' if ok else 'FAIL'}"
        if parts:
            line += " [" + ", ".join(parts) + "]"
        if details:
            line += "  " + "; ".join(details)
        tr.write_line(line)
