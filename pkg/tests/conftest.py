import pytest

_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion with a pass/fail summary line")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    n, title = mark.args
    details = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    line = f"criterion {n:>2} {'PASS' if rep.passed else 'FAIL'}: {title}"
    _LINES.append(f"{line} ({details})" if details else line)


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
