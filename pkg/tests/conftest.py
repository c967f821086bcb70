import numpy as np
import pytest

from lidarcodec.config import ModelConfig
from lidarcodec.geom import PointCloudFrame, SensorConfig
from lidarcodec.ssm import new_model

SMALL_SENSOR = SensorConfig(L=8, W=64, phi_up=0.2, phi_down=-0.4, rho_max=50.0, A=16)


def cell_point(cfg, v, u, rho=10.0):
    """Cartesian point at the centre of grid cell ``(v, u)`` (1-based)."""
    phi = cfg.phi_down + (v - 0.5) * (cfg.phi_up - cfg.phi_down) / cfg.L
    theta = ((u - 0.5) / cfg.W - 0.5) * 2 * np.pi
    return [rho * np.cos(phi) * np.cos(theta), rho * np.cos(phi) * np.sin(theta), rho * np.sin(phi)]


def random_frame(rng, cfg, n, out_of_fov=0.1):
    """Points spread over (and a little beyond) the sensor's field of view."""
    span = cfg.phi_up - cfg.phi_down
    phi = rng.uniform(cfg.phi_down - out_of_fov * span, cfg.phi_up + out_of_fov * span, n)
    theta = rng.uniform(-np.pi, np.pi, n)
    rho = rng.uniform(0.5, cfg.rho_max * 1.2, n)
    pos = np.stack([rho * np.cos(phi) * np.cos(theta), rho * np.cos(phi) * np.sin(theta),
                    rho * np.sin(phi)], axis=1)
    return PointCloudFrame(pos, rng.integers(0, cfg.A, n))


@pytest.fixture
def small_sensor():
    return SMALL_SENSOR


@pytest.fixture(scope="session")
def small_model():
    cfg = ModelConfig(D=16, S=2, window=8, ssm_state=4, A=SMALL_SENSOR.A)
    return new_model(cfg, SMALL_SENSOR, seed=3)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_RESULTS = {}


def record_criterion(number, title, passed, detail):
    ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)
    print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, passed, detail = ACCEPTANCE_RESULTS[number]
        tr.write_line(f"{number}. {'PASS' if passed else 'FAIL'}  {title}: {detail}")
