import numpy as np
import pytest

from kstab.polytope import REGISTRY, by_name

ALL = sorted(REGISTRY)
SURFACES = ["P2", "P1xP1", "Bl1P2", "Bl2P2"]


@pytest.fixture(params=ALL)
def polytope(request):
    return by_name(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.skipped:
        return
    if rep.when == "call" or rep.failed:
        ok = _CRITERIA.get(mark.args[0], True)
        _CRITERIA[mark.args[0]] = ok and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if _CRITERIA[n] else 'FAIL'}")
