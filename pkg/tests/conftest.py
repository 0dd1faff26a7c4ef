import numpy as np
import pytest
from hypothesis import settings

from pucci.core import EllipticityPair
from pucci.nonlinearity import Ball, SystemSpec, builtin_combustion

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def unit_pair():
    return EllipticityPair(1.0, 1.0)


@pytest.fixture(scope="session")
def combustion_spec():
    """Two-equation combustion system on the unit disc (tau = 20, alpha = 1/2)."""
    p = EllipticityPair(1.0, 1.0)
    return SystemSpec([p, p], builtin_combustion(2, 20.0, [0.5, 0.5]), Ball(1.0, 2))


def random_symmetric(rng, n):
    A = rng.normal(size=(n, n))
    return (A + A.T) / 2


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.failed and rep.when == "setup"):
        _CRITERIA[mark.args[0]] = (mark.args[1], rep.outcome, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcome, duration = _CRITERIA[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {duration:7.2f}s  {title}")
