import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "status": "PASS", "duration": 0.0, "skipped": 0})
    if report.when in ("setup", "call"):
        # module fixtures such as the training runs are charged to their first user
        entry["duration"] += report.duration
    if report.skipped:
        entry["skipped"] += 1
    elif report.failed:
        entry["status"] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        note = f", {e['skipped']} opt-in check skipped" if e["skipped"] else ""
        terminalreporter.write_line(
            f"criterion {number:>2}: {e['status']:<4}  {e['title']}  ({e['duration']:.1f} s{note})"
        )
