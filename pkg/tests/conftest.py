"""Collects per-criterion outcomes from ``@pytest.mark.criterion`` tests and
prints one PASS/FAIL line per criterion at the end of the run."""

import pytest

_results: dict[int, dict] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _results.setdefault(number, {"title": title, "outcomes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "setup":
        item._criterion_setup = report.duration
    if report.when == "call" or (report.when == "setup" and not report.passed):
        seconds = report.duration + (getattr(item, "_criterion_setup", 0.0) if report.when == "call" else 0.0)
        _results[mark.args[0]]["outcomes"].append((item.name, report.passed, seconds))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        outcomes = entry["outcomes"]
        if not outcomes:
            status = "NOT RUN"
        else:
            status = "PASS" if all(ok for _, ok, _ in outcomes) else "FAIL"
        seconds = sum(d for _, _, d in outcomes)
        terminalreporter.write_line(
            f"criterion {number}: {status}  {entry['title']}  ({seconds:.1f}s)"
        )
