import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        notes = [v for k, v in item.user_properties if k == "note"]
        if hasattr(report, "wasxfail"):
            state = "xfail"
            notes.append(report.wasxfail.removeprefix("reason: "))
        else:
            state = report.outcome
        _CRITERIA.setdefault(marker.args[0], []).append((item.name, state, notes))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        results = _CRITERIA[number]
        ok = all(state == "passed" for _, state, _ in results)
        tr.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}")
        for name, state, notes in results:
            if state != "passed" or notes:
                detail = "; ".join(notes)
                tr.write_line(f"    {name} [{state}] {detail}".rstrip())
