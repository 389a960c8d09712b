"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""
import pytest

_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = report.failed
    if report.when == "call" or failed:
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        _OUTCOMES[number] = (title, "FAIL" if failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        title, status, detail = _OUTCOMES[number]
        line = f"criterion {number} {status}: {title}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)
