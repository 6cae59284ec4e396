from __future__ import annotations

import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



@pytest.fixture(scope="session")
def calibration_runs():
    """20 seeds of stereo and projector calibration at 0.1 px observation noise.

    Shared by the calibration property test and the acceptance suite so the
    Monte-Carlo is paid for once per session.
    """
    from mmscan.calib import CalibrationBoard, calibrate_pair
    from mmscan.simulator import run_protocol
    from mmscan.simulator.scene import default_rig

    rig = default_rig()
    board = CalibrationBoard()
    sizes = {n: rig.device(n).image_size for n in ("cam1", "cam2", "projector")}
    runs = []
    for seed in range(20):
        run = run_protocol("calib-board", None, seed=seed)
        pairs = {other: calibrate_pair(board, run.observations, sizes, "cam1", other) for other in ("cam2", "projector")}
        runs.append(pairs)
    return rig, runs


# -- acceptance report ---------------------------------------------------------------

_CRITERIA: dict[int, list[tuple[bool, str]]] = {}
_SESSION_START = time.perf_counter()


@pytest.fixture
def record_criterion():
    """Collect (passed, detail) checks under an acceptance criterion number."""
    def record(number: int, checks: list[tuple[bool, str]]) -> None:
        _CRITERIA.setdefault(number, []).extend(checks)
        for ok, text in checks:
            print(f"criterion {number}: {'ok  ' if ok else 'MISS'} {text}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        checks = _CRITERIA[number]
        status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        missed = [text for ok, text in checks if not ok]
        detail = "; ".join(missed) if missed else "; ".join(text for _, text in checks)
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
    terminalreporter.write_line(f"session wall time {time.perf_counter() - _SESSION_START:.0f} s")
