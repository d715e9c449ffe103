import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria = {}


@pytest.fixture
def detail(request):
    """Free-form notes a criterion test attaches to its summary line."""
    request.node.detail = {}
    return request.node.detail


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    num, title = mark.args
    notes = ", ".join(f"{k}={v}" for k, v in getattr(item, "detail", {}).items())
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _criteria[num] = f"criterion {num} {status}: {title}" + (f" ({notes})" if notes else "")


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for num in sorted(_criteria):
            terminalreporter.write_line(_criteria[num])
