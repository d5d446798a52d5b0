import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("sinklab", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sinklab")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rand_tensor(rng, shape, scale=1.0, requires_grad=False):
    from sinklab.tensor import Tensor

    return Tensor(rng.normal(0, scale, size=shape), requires_grad=requires_grad)


# ---- acceptance summary: one line per criterion, printed after the run

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" not in report.nodeid:
        return
    key = report.nodeid.split("::test_c", 1)[1][:2]
    detail = dict(report.user_properties).get("criterion", "")
    if report.failed:
        _CRITERIA[key] = ("FAIL", detail or f"{report.when} failed")
    elif report.when == "call" and key not in _CRITERIA:
        _CRITERIA[key] = ("PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        status, detail = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {int(key):2d}: {status}  {detail}")
