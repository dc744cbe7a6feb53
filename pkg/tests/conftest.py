"""Summary lines for tests marked ``@pytest.mark.criterion(n, title)``."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        n, title = marker.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if rep.failed and not detail:
            detail = str(rep.longrepr).strip().splitlines()[-1]
        _RESULTS[n] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, detail = _RESULTS[n]
        line = f"[{status}] criterion {n}: {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
