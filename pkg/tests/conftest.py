import numpy as np
import pytest
import torch

from baton.numerics import RngStream, rng_tensor, serial_mode
from baton.prompt import PlanGeometry
from baton.rope import GridSpec
from baton.synth_data import FrozenStandIns, generate_samples

serial_mode()

F64 = torch.float64
GEOM = PlanGeometry()
GRID = GridSpec(8, 4, 4, GEOM.n_keyframes, GEOM.sem_h, GEOM.sem_w, 16, GEOM.audio_len)


def normal(seed: int, *shape: int, dtype=F64) -> torch.Tensor:
    return rng_tensor(RngStream(seed), shape, "normal", 1.0, dtype)


@pytest.fixture(scope="session")
def stand() -> FrozenStandIns:
    return FrozenStandIns(123, GEOM, GRID, 16, 8)


@pytest.fixture(scope="session")
def scenes(stand):
    """Fifty default-geometry samples, shared by the calibration tests."""
    return generate_samples(0, range(50), stand)


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")
    config.addinivalue_line("markers", "report(title): measurement printed in the summary, not asserted")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion") or item.get_closest_marker("report")
    if marker is None or (report.when != "call" and report.passed):
        return
    key = marker.args[0] if marker.name == "criterion" else f"report: {marker.args[0]}"
    details = ", ".join(f"{k}={v}" for k, v in item.user_properties)
    item.config._acceptance[key] = (marker.args[-1], report.passed, details)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    criteria = sorted(k for k in results if isinstance(k, int))
    for key in criteria + sorted(k for k in results if isinstance(k, str)):
        title, passed, details = results[key]
        if isinstance(key, int):
            line = f"criterion {key:2d} {'PASS' if passed else 'FAIL'}  {title}"
        else:
            line = f"reported      {'ok  ' if passed else 'ERR '}  {title}"
        terminalreporter.write_line(line + (f"  [{details}]" if details else ""))
