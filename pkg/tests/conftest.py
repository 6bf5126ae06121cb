import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from brainlab.policies import BigramPolicy, CategoricalPolicy
from brainlab.rewards import TableReward
from brainlab.oracle import Task
from brainlab.policies import all_sequences

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_categorical_task(rng, V=3, P=1, reward_scale=1.0, gamma=1.0):
    prior = CategoricalPolicy(rng.normal(size=(P, V)))
    reward = TableReward(rng.normal(scale=reward_scale, size=(P, V)), gamma=gamma)
    return Task(prior, reward, tuple(range(P)))


def random_bigram_task(rng, V=2, L=3, P=1):
    prior = BigramPolicy(rng.normal(size=(P, V + 1, V + 1)), L, aggregation="sum")
    outcomes = all_sequences(V, L)
    reward = TableReward(rng.normal(size=(P, len(outcomes))), outcomes)
    return Task(prior, reward, tuple(range(P)))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
