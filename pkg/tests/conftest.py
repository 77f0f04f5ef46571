import numpy as np
import pytest

from msedf.data import SyntheticSpec, generate_synthetic, load_dataset


@pytest.fixture(scope="session")
def synthetic_paths(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    return generate_synthetic(SyntheticSpec(), out)


@pytest.fixture(scope="session")
def synthetic_bundle(synthetic_paths):
    return load_dataset(*synthetic_paths)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
