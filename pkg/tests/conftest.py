import numpy as np
import pytest

from mortgee import SimulationSpec, simulate_panel


@pytest.fixture
def rng():
    return np.random.default_rng(20240815)


@pytest.fixture(scope="session")
def small_single_panel():
    """Single-population panel, ages 20-80, 20 training + 3 test years."""
    spec = SimulationSpec(seed=101, test_years=(2011, 2013))
    return simulate_panel(spec)


@pytest.fixture(scope="session")
def small_multi_panel():
    """Two countries x two genders, ages 20-80, paper-shaped year windows."""
    spec = SimulationSpec(
        variant="multi_pop",
        countries=("AUT", "CZE"),
        genders=("female", "male"),
        train_years=(1991, 2010),
        test_years=(2011, 2019),
        rate_kind="q",
        seed=202,
    )
    return simulate_panel(spec)
