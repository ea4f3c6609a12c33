import numpy as np
import pytest
import torch

from unimlvg import scenesim
from unimlvg.model import ModelConfig, UniMLVG

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def world():
    return scenesim.generate_scene(11, scenesim.SceneSpec(horizon=10, n_actors=4, attributes=("day", "sunny")))


@pytest.fixture(scope="session")
def night_world():
    return scenesim.generate_scene(11, scenesim.SceneSpec(horizon=10, n_actors=4, attributes=("night", "sunny")))


@pytest.fixture(scope="session")
def rig(world):
    return world.rig(frames=range(4))


@pytest.fixture(scope="session")
def frames(world):
    return scenesim.render_clip(world, world.rig())


@pytest.fixture
def micro_cfg():
    return ModelConfig(height=8, width=8, patch=4, hidden=16, depth=2, heads=2, mlp_ratio=2.0,
                       text_width=8, adapter_hidden=8, ray_hidden=8, ray_freqs=2,
                       adapter_levels=2, injection_sites=(0, 1))


@pytest.fixture
def micro_model(micro_cfg):
    torch.manual_seed(0)
    return UniMLVG(micro_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE[number] = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    print(ACCEPTANCE[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
