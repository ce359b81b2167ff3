import numpy as np
import pytest

from vesselda.data import SynthConfig, make_dataset

SMALL_COUNTS = {"S_L": 8, "T_L": 6, "T_U": 6, "T_val": 3, "T_test": 4}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A few images per split at 16x16; enough for wiring tests."""
    root = tmp_path_factory.mktemp("small_ds")
    make_dataset(root, SynthConfig(size=16, seed=5), SMALL_COUNTS)
    return root
