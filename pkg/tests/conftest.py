import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(int(os.environ.get("PILIGHT_THREADS", "1")))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_env(seed, width=64, height=32):
    from pilight.imagecore import Rng
    from pilight.lighting import smooth_random_envmap
    return smooth_random_envmap(Rng(seed), width, height)


def central_fd(f, x, idx, h):
    """Central difference of scalar ``f`` w.r.t. ``x[idx]`` (float64, in place then restored)."""
    old = x[idx]
    x[idx] = old + h
    fp = f(x)
    x[idx] = old - h
    fm = f(x)
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        _CRITERIA[name] = report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        rep = _CRITERIA[name]
        number = int(name.split("_")[2])
        status = "PASS" if rep.passed else "FAIL"
        detail = ", ".join(f"{k}={v}" for k, v in rep.user_properties)
        terminalreporter.write_line(f"criterion {number:2d} {status}  {name[18:]}  {detail}")
