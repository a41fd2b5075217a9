import numpy as np
import pytest

from fg3dmot.core import Detection


def det(frame, pos, conf=8.0, dims=(1.5, 1.6, 3.9), yaw=0.0):
    return Detection(frame, np.asarray(pos, float), np.asarray(dims, float), yaw, conf)


def line_sequence(n_frames, start=(0.0, 0.0, 0.0), vel=(1.0, 0.0, 0.0), dt=0.1, conf=8.0, skip=()):
    """Detections of one object moving at constant velocity; ``skip`` frames are missed."""
    start, vel = np.asarray(start, float), np.asarray(vel, float)
    return {t: ([] if t in skip else [det(t, start + vel * dt * t, conf)]) for t in range(n_frames)}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
