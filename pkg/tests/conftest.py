import numpy as np
import pytest

from tokendiff.datagen import SyntheticTask
from tokendiff.schedule import ScheduleConfig, build_schedule


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def point_mass_task(K=3, D=2, C=2):
    """Deterministic chains: condition c emits (c, c+1, ...) mod K."""
    initial = np.zeros((C, K))
    transition = np.zeros((C, K, K))
    for c in range(C):
        initial[c, c % K] = 1.0
        for k in range(K):
            transition[c, k, (k + 1) % K] = 1.0
    return SyntheticTask(C=C, K=K, D=D, initial=initial, transition=transition)


def make_sched(K=4, T=10, mask_mass=0.9, uniform_mass=0.0999):
    return build_schedule(
        ScheduleConfig(
            K=K, T=T, terminal_mask_mass=mask_mass, terminal_uniform_mass=uniform_mass
        )
    )


@pytest.fixture
def sched():
    return make_sched()
