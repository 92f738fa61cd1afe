"""Acceptance summary: one PASS/FAIL line per criterion, from the real test outcomes."""
import pytest

_outcomes: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    report = outcome.get_result()
    entry = _outcomes.setdefault(number, {"title": title, "failed": [], "ran": False})
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["ran"] = True
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        entry = _outcomes[number]
        if not entry["ran"]:
            status = "SKIPPED"
        elif entry["failed"]:
            status = "FAIL (" + ", ".join(entry["failed"]) + ")"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {number} {entry['title']}: {status}")
