import numpy as np
import pytest

from latticegp.utils.covariance import POWEXP, ParamSet, model_for_embedding
from latticegp.utils.lattice import DesignSpec, ObservationMask, build_embedding, build_lattice, make_mask
from latticegp.utils.solver import _layout_cache


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _fresh_layouts():
    _layout_cache.clear()
    yield
    _layout_cache.clear()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def exp_params():
    return ParamSet(mu=0.0, sigma2=2.0, lam=0.141, shape=1.0)


@pytest.fixture
def small_emb():
    """8x8 base, 24x24 torus."""
    return build_embedding(build_lattice(8, 8, 1 / np.sqrt(2)), r_factor=1.5)


@pytest.fixture
def small_model(small_emb):
    return model_for_embedding(POWEXP, small_emb)


@pytest.fixture
def random_mask(small_emb):
    return make_mask(small_emb, DesignSpec("random", 0.1), np.random.default_rng(3))


@pytest.fixture
def full_mask(small_emb):
    """Every embedding site observed."""
    return ObservationMask.from_indices(small_emb, np.arange(small_emb.N), "full")
