from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings
from scipy.spatial.transform import Rotation

from mvfuse.geometry import CameraView, RigidTransform
from mvfuse.simulate import SceneConfig, generate

settings.register_profile("default", deadline=None, derandomize=True)
settings.load_profile("default")

N_TRIALS = 1000


def random_pose(rng, scale=0.1) -> RigidTransform:
    return RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(0, scale, 3))


def simple_view(view_id=0, f=500.0, c=64.0, pose=None, size=(128, 128), origin=(0.0, 0.0)) -> CameraView:
    return CameraView(view_id, f, f, c, c, pose or RigidTransform.identity(), origin, size)


@pytest.fixture(scope="session")
def noiseless_scene():
    return generate(SceneConfig.noiseless(instance_count=1, rng_seed=0), scene_id="noiseless")


@pytest.fixture(scope="session")
def noiseless_multi():
    return generate(SceneConfig.noiseless(instance_count=3, rng_seed=1), scene_id="noiseless3")


@pytest.fixture(scope="session")
def noisy_scene():
    return generate(SceneConfig.benchmark(rng_seed=2), scene_id="noisy")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria append "PASS ..." / "FAIL ..." lines here; they are
# echoed in the terminal summary so they survive output capturing
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
