from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import settings

from fwclosure.scenarios import build_friction_oscillator, build_twofold

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def friction_model():
    return build_friction_oscillator(0.05, 50.0, 0.03, 1.0, 0.5)


@pytest.fixture
def twofold_model():
    return build_twofold(-2.0, -1.1, 10.0, (0.05, 0.0, 0.0))


def bowed_friction(alpha=0.5, lplus=0.05, stiffness=math.pi**2):
    return build_friction_oscillator(lplus, 50.0, 0.03, 1.0, alpha, stiffness=stiffness)


def reference_twofold():
    return build_twofold(-2.0, -1.1, 10.0, (0.05, 0.0, 0.0))


def rel(a, b):
    return abs(a - b) / max(1.0, abs(b))


def vec(*xs):
    return np.array(xs, dtype=float)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
