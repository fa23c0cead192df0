import matplotlib
matplotlib.use('Agg')

import nat_lattice.core
import numpy as np
import pytest

def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='Run slow end-to-end experiments')

def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: end-to-end experiments that train toy models')

def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)

@pytest.fixture
def rng():
    return np.random.default_rng(42)

@pytest.fixture
def ab_vocabulary():
    # a -> 5, b -> 6
    return nat_lattice.core.Vocabulary.from_tokens(['a', 'b'])

@pytest.fixture
def random_lattice(rng):
    def make(num_positions, width):
        return nat_lattice.core.EmissionLattice.from_logits(rng.normal(size=(num_positions, width)))
    return make
