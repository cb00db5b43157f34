import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mixq.vit import ModelConfig, init_weights

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def small_config():
    return ModelConfig(num_blocks=2, embed_dim=16, heads=2, mlp_dim=32, classes=4,
                       patch_size=4, image_height=8, image_width=8, channels=3, seed=3)


@pytest.fixture
def small_model(small_config):
    return init_weights(small_config)


@pytest.fixture
def small_images(small_config):
    rng = np.random.default_rng(11)
    c = small_config
    return rng.normal(size=(5, c.image_height, c.image_width, c.channels))
