import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bingpp import bing, evaluation

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

TRAIN_SEEDS = range(1000, 1020)

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def train_scenes():
    return [evaluation.synth_scene(s, 3 + s % 4) for s in TRAIN_SEEDS]


@pytest.fixture(scope="session")
def synth_model():
    data = [(img, np.array([g.box.as_tuple() for g in gts])) for img, gts in train_scenes()]
    return bing.train_simple(data, 0.5, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
