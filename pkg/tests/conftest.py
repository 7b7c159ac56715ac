from __future__ import annotations

import numpy as np
import pytest

from radar_autocal.config import PipelineConfig
from radar_autocal.ingest import RecordingSession
from radar_autocal.pipeline import run_calibration
from radar_autocal.sim import canonical_scenario, generate_scenario, write_scenario


@pytest.fixture(scope="session")
def canonical():
    return generate_scenario(canonical_scenario(0))


@pytest.fixture(scope="session")
def canonical_run(canonical):
    return run_calibration(RecordingSession(canonical.frames, canonical.pose), PipelineConfig())


@pytest.fixture(scope="session")
def canonical_files(canonical, tmp_path_factory):
    out = tmp_path_factory.mktemp("canonical")
    return write_scenario(canonical, out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
