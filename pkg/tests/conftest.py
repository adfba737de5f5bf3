import pytest

_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    if rep.failed or (rep.when == "call" and number not in _RESULTS):
        printed = [ln for ln in rep.capstdout.splitlines() if ln.startswith(f"criterion {number}:")]
        detail = printed[-1].split("  ", 1)[-1] if printed else title
        _RESULTS[number] = ("FAIL" if rep.failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
