"""Shared pytest hooks: one PASS/FAIL line per acceptance criterion."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): an acceptance criterion test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    n, title = mark.args
    status = "PASS" if rep.passed else "FAIL"
    prev = _RESULTS.get(n)
    if prev is not None:  # parametrized criterion: fail if any case fails
        status = "FAIL" if "FAIL" in (status, prev[0]) else "PASS"
        detail = " | ".join(d for d in (prev[2], detail) if d)
    _RESULTS[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, detail = _RESULTS[n]
        terminalreporter.write_line(f"AC{n} {status}  {title}" + (f"  [{detail}]" if detail else ""))
