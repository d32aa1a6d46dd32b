import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from primil.collector import CollectorConfig, collect_dataset
from primil.idm import train_idm
from primil.nn import TrainConfig

settings.register_profile("primil", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("primil")


@pytest.fixture(scope="session")
def small_pp_data():
    """A small PickPlaceLite IDM dataset (seconds to collect)."""
    return collect_dataset("PickPlaceLite", CollectorConfig(episodes=400, seed=3))


@pytest.fixture(scope="session")
def small_pp_idm(small_pp_data):
    return train_idm(small_pp_data, TrainConfig(epochs=15, seed=1), TrainConfig(epochs=30, batch_size=128, seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_criterion(number: int, name: str, ok: bool, detail: str):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
