import numpy as np
import pytest
from hypothesis import settings

from sfdlab.gmm import default_spec
from sfdlab.models import MlpConfig, WarmupConfig
from sfdlab.schedule import build_schedule
from sfdlab.trainer import SfdConfig

settings.register_profile("repo", deadline=None, max_examples=30)
settings.load_profile("repo")

ACCEPTANCE_LINES = []


@pytest.fixture
def schedule():
    return build_schedule()


@pytest.fixture
def spec():
    return default_spec()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_config(**kw):
    """A few-second run: small net, short warmup."""
    base = dict(steps=30, distill_steps=20, forget_steps=20, eval_interval=10,
                model=MlpConfig(4, hidden=(16, 16), class_dim=4, time_dim=8),
                warmup=WarmupConfig(steps=40, batch_size=64), batch_size=16)
    base.update(kw)
    return SfdConfig(**base)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
