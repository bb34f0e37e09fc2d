import functools
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from curllod import falk_winther, fem  # noqa: E402
from curllod.mesh import build_box_mesh, refine  # noqa: E402


@functools.lru_cache(maxsize=None)
def hierarchy(n, r):
    return refine(build_box_mesh(n), r)


@functools.lru_cache(maxsize=None)
def projection(n, r):
    return falk_winther.projection(hierarchy(n, r))


def checkerboard(hier, seed=0):
    return fem.Coefficient.random_checkerboard(hier.fine, hier.h, 1.0, 10.0, seed)


@pytest.fixture(scope="session")
def hier21():
    return hierarchy(2, 1)


@pytest.fixture(scope="session")
def proj21():
    return projection(2, 1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
