"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""
from collections import OrderedDict

import pytest

_RESULTS: "OrderedDict[str, dict]" = OrderedDict()


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    return mark.args if mark else None


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    crit = _criterion(item)
    if crit is None:
        return
    cid, title = crit
    entry = _RESULTS.setdefault(cid, {"title": title, "ok": True, "seen": False, "detail": []})
    if report.when == "call" or report.failed:
        entry["seen"] = True
        if report.failed:
            entry["ok"] = False
    for key, value in getattr(item, "user_properties", []):
        if key == "detail" and value not in entry["detail"]:
            entry["detail"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, e in sorted(_RESULTS.items(), key=lambda kv: kv[0]):
        if not e["seen"]:
            continue
        status = "PASS" if e["ok"] else "FAIL"
        line = f"criterion {cid}: {status}  {e['title']}"
        if e["detail"]:
            line += "  [" + "; ".join(e["detail"]) + "]"
        terminalreporter.write_line(line)
