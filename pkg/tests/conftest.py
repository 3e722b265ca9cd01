import sys

import numpy as np
import pytest

from fmmlu.geometry import make_sphere, make_wiggly_torus


@pytest.fixture(scope="session")
def torus_small():
    return make_wiggly_torus(8, 4, 4)


@pytest.fixture(scope="session")
def sphere_small():
    return make_sphere(1.0, 2, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
