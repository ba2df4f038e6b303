import sys
from pathlib import Path

import pytest

SCRIPTS_DIR = Path(__file__).resolve().parent.parent / 'scripts'
sys.path.insert(0, str(SCRIPTS_DIR))

from layout_model import load_vocab  # noqa: E402
from generate_data import GeneratorConfig, synth_generate  # noqa: E402
from score_network import ScoreNetConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the training-based acceptance checks')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: trains a network; needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope='session')
def dinner_vocab():
    return load_vocab('dinner')


@pytest.fixture(scope='session')
def desk_vocab():
    return load_vocab('desk')


@pytest.fixture(scope='session')
def dinner_left(dinner_vocab):
    return synth_generate(GeneratorConfig('dinner-left', seed=3, count=24), dinner_vocab)


@pytest.fixture
def tiny_net():
    return ScoreNetConfig(vocab_size=8, hidden_width=16, embed_dim=8, seed=5)
