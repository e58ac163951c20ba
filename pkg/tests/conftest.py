import pytest

from config import PipelineConfig
from geometry import CameraPose, Intrinsics, Quaternion, look_at
from helpers import RESOLUTION
from scene_synth import SceneRecipe, generate_scene


@pytest.fixture
def resolution():
    return RESOLUTION


@pytest.fixture
def intrinsics():
    return Intrinsics(100.0, 100.0, 32.0, 24.0)


@pytest.fixture
def identity_pose(intrinsics):
    return CameraPose(Quaternion(), (0.0, 0.0, 0.0), intrinsics)


@pytest.fixture
def overhead_pose():
    """Fronto-parallel camera three units above the z = 0 plane."""
    return look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0), Intrinsics.from_fov(RESOLUTION), up=(0.0, 1.0, 0.0))


@pytest.fixture(scope="session")
def checker_scene():
    return generate_scene(SceneRecipe("checker-plane", 4000), 0)


@pytest.fixture(scope="session")
def small_room():
    return generate_scene(SceneRecipe("room", 6000), 3)


@pytest.fixture
def tiny_config(tmp_path):
    return PipelineConfig(primitive_budget=4000, duration_s=4.0, fps=5.0, keyframe_count=6, chunk_duration_s=2.0,
                          resolution=RESOLUTION, output_dir=str(tmp_path / "run"))
