import numpy as np
import pytest

from collabrecon import simclient as sc
from collabrecon.se3 import RigidTransform
from collabrecon.volume import CameraIntrinsics, TsdfVolume

K_SMALL = CameraIntrinsics(200.0, 200.0, 111.5, 85.5, 224, 172)


def plane_volume(depth_m: float = 2.0) -> tuple[TsdfVolume, CameraIntrinsics]:
    """A frontal plane at ``depth_m`` seen from the identity pose."""
    vol = TsdfVolume((160, 128, 128), 0.02, origin=(-1.6, -1.28, 0.5))
    vol.integrate(np.full(K_SMALL.shape, depth_m, np.float32), None, RigidTransform.identity(), K_SMALL)
    return vol, K_SMALL


@pytest.fixture
def plane():
    return plane_volume()


@pytest.fixture(scope="session")
def room():
    return sc.SyntheticScene.generate(3)


@pytest.fixture(scope="session")
def two_agents(room):
    return sc.make_overlapping_sequences(room, 2, 0.5, seed=3, frames_per_agent=30)


@pytest.fixture(scope="session")
def agent_frames(room, two_agents):
    """Rendered frames of both agents (local poses), cached for the session."""
    return [list(sc.synthetic_frames(room, tr)) for tr in two_agents.trajectories]


ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
