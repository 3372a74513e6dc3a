import numpy as np
import pytest

from ps2f.experiments import DEFAULT_BEAM, DEFAULT_SENSOR_PITCH, DEFAULT_SYSTEM, pair_for_scene
from ps2f.masks import design_dhpsf_mask
from ps2f.optics import Grid2D


@pytest.fixture(scope="session")
def system():
    return DEFAULT_SYSTEM


@pytest.fixture(scope="session")
def beam():
    return DEFAULT_BEAM


@pytest.fixture(scope="session")
def sensor():
    return Grid2D.square(64, DEFAULT_SENSOR_PITCH)


@pytest.fixture(scope="session")
def dh_mask(system, beam):
    return design_dhpsf_mask(beam, system, system.pupil_grid(256))


@pytest.fixture(scope="session")
def pair64():
    """Both PSF stacks on 64 planes over +/-2.5 mm (the desk-scale geometry)."""
    return pair_for_scene(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the summary."""
    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
