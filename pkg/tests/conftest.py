"""Per-criterion PASS/FAIL summary for the acceptance suite."""
import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if not mark:
        return
    num, title = mark.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _RESULTS.setdefault(num, {"title": title, "outcomes": []})["outcomes"].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        r = _RESULTS[num]
        status = "PASS" if all(r["outcomes"]) else "FAIL"
        terminalreporter.write_line(f"criterion {num}: {status}  {r['title']}")
