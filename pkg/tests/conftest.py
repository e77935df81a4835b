from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from ipsw_mi.datagen import ScenarioConfig, make_superpopulation
from ipsw_mi.missingness import MarSpec, induce_mar

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def main_pop():
    return make_superpopulation(ScenarioConfig(seed=11))


@pytest.fixture(scope="session")
def small_pop():
    return make_superpopulation(ScenarioConfig(n_target=2000, alpha=(-2.0, 1.0, 1.0, 1.0), seed=5))


@pytest.fixture(scope="session")
def small_masked(small_pop):
    return induce_mar(small_pop.data, MarSpec(frac_nontrial=0.3, frac_trial=0.1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
