import os

import pytest

import mjplab.config

SLOW_ENV = 'MJP_LAB_SLOW'

TINY_CONFIG = {
    'model': {
        'k': 2,
        'hidden': 4,
        'ode_hidden': [4],
        'psi_hidden': [4],
        'lambda_hidden': [4],
    },
    'train': {
        'epochs': 1,
        'batch_size': 2,
        'quadrature_points': 5,
        'cov_freeze_steps': 0,
        'seq_anneal_steps': 0,
        'seq_anneal_growth': 0,
    },
    'prior': {
        'noise_dim': 3,
        'hidden': [4],
    },
    'emission': {
        'hidden': [4],
    },
    'predict': {
        'samples': 4,
        'prior_samples': 4,
    },
}


def pytest_collection_modifyitems(config, items):
    if os.environ.get(SLOW_ENV):
        return
    skip = pytest.mark.skip(reason='set %s=1 to run slow tests' % SLOW_ENV)
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_config():
    """Build a small, fast config; keyword arguments override whole sections by key."""
    def build(**sections):
        raw = {name: dict(values) for name, values in TINY_CONFIG.items()}
        for name, values in sections.items():
            raw.setdefault(name, {}).update(values)
        return mjplab.config.Config.from_dict(raw)
    return build
