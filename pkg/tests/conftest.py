import numpy as np
import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")
    prev = _ACCEPTANCE.get(number)
    if prev is None or rep.failed:
        status = "PASS" if rep.passed else "FAIL" if rep.failed else "SKIP"
        _ACCEPTANCE[number] = (status, title, rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, duration, detail = _ACCEPTANCE[number]
        line = f"criterion {number:2d} {status}  {title} ({duration:.1f} s)"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
