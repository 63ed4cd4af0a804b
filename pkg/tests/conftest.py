import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    entry = _results.setdefault(num, {"title": title, "ok": True, "ran": False})
    if report.when == "call" or (report.when == "setup" and report.failed):
        entry["ran"] = True
        entry["ok"] &= report.passed
    elif report.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_results):
        r = _results[num]
        status = "PASS" if r["ok"] and r["ran"] else ("SKIP" if not r["ran"] else "FAIL")
        tr.write_line(f"[{status}] criterion {num:2d}: {r['title']}")
