import pytest

from bbtune.objective import build_world, plant_task
from bbtune.service import InferenceService


@pytest.fixture(scope="session")
def small_world():
    # D = 10 * 16 = 160, d = 40: fast enough for per-test builds
    return build_world(model_seed=3, proj_seed=5, sub_dim=40, prompt_length=10)


@pytest.fixture(scope="session")
def small_task(small_world):
    w = small_world
    return plant_task(11, 4, 2, w.spec, 12, w.model.vocab_size, w.model, w.p0, test_per_class=16)


@pytest.fixture()
def small_service(small_world):
    return InferenceService(small_world.model, (small_world.A, small_world.p0), max_batch=64)
