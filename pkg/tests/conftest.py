import pytest

_outcomes = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    failed = report.failed
    skipped = report.when == "call" and report.skipped
    if report.when == "call" or failed:
        prev = _outcomes.get(name, "PASS")
        status = "FAIL" if failed or prev == "FAIL" else ("SKIP" if skipped and prev != "PASS" else prev)
        _outcomes[name] = status


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _outcomes.items():
        terminalreporter.write_line(f"{status}  {name}")
