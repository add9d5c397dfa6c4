import os
import sys

import numpy as np
import pytest
from hypothesis import settings

from metanet_calib.core import BoundaryConditions, NetworkGeometry
from metanet_calib.params import default_warm_start

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def make_geom(n=3, lanes=3, on=(), off=(), length=0.4, dt=10.0):
    lanes = (lanes,) * n if np.isscalar(lanes) else tuple(lanes)
    return NetworkGeometry(n, length, dt, lanes, frozenset(on), frozenset(off))


def constant_bc(horizon, q=4000.0, v=95.0, rho=25.0):
    return BoundaryConditions(np.full(horizon, q), np.full(horizon, v), np.full(horizon, rho))


@pytest.fixture
def geom3():
    return make_geom(3)


@pytest.fixture
def warm3(geom3):
    return default_warm_start(geom3)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def _report(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
