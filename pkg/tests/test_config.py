import os
import tempfile

import pytest

import mjplab.config
from mjplab.config import Config
from mjplab.errors import ConfigError

EXAMPLE = """
[model]
k = 6
hidden = 16
posterior = "masked"

[train]
lr = 0.01
epochs = 3

[prior]
structure = "dfr"
mode = "explicit"

[emission]
kind = "categorical"
"""


def test_defaults():
    config = Config()
    assert config.model.k == 2
    assert config.train.lr == 1e-3
    assert config.train.quadrature_points == 200
    assert config.prior.mode == 'implicit'
    assert config.emission.kind == 'gaussian'
    assert config.predict.mode == 'master'


def test_loads():
    config = mjplab.config.loads(EXAMPLE)
    assert config.model.k == 6
    assert config.model.hidden == 16
    assert config.train.lr == 0.01
    assert config.train.epochs == 3
    assert config.prior.structure == 'dfr'
    assert config.emission.kind == 'categorical'
    assert config.model.ode_hidden == [64, 64]


def test_integer_accepted_for_float():
    config = mjplab.config.loads('[train]\nlr = 1\n')
    assert config.train.lr == 1.0
    assert isinstance(config.train.lr, float)


def test_load_file():
    with tempfile.NamedTemporaryFile(suffix='.toml') as temp:
        temp.write(EXAMPLE.encode('utf-8'))
        temp.flush()
        config = mjplab.config.load(temp.name)
    assert config.prior.mode == 'explicit'


def test_load_none_gives_defaults():
    assert mjplab.config.load(None) == Config()


def test_round_trip_through_dict():
    config = mjplab.config.loads(EXAMPLE)
    assert Config.from_dict(config.to_dict()) == config


def test_replace():
    config = Config().replace('train', epochs=7)
    assert config.train.epochs == 7
    assert config.model == Config().model


@pytest.mark.parametrize(
    'text',
    [
        '[nonsense]\nx = 1\n',
        '[train]\nlearning_rate = 0.1\n',
        '[train]\nlr = "fast"\n',
        '[train]\nepochs = 1.5\n',
        '[model]\nlayer_norm = 1\n',
        '[model]\nk = 0\n',
        '[model]\nposterior = "sparse"\n',
        '[model]\ndropout = 1.0\n',
        '[train]\nlr = -0.1\n',
        '[train]\ncov_freeze_steps = -1\n',
        '[prior]\nmode = "guess"\n',
        '[emission]\ncovariance = "banded"\n',
        '[predict]\nmode = "euler"\n',
        '[model]\nmean_field = true\n',
        '[prior]\nstructure = "dfr"\n',
        '[model]\nposterior = "masked"\n',
        '[data]\ncsv_delimiter = ";;"\n',
        '[data]\ncsv_time_col = ""\n',
        'train = 5\n',
        '[train\n',
    ]
)
def test_invalid(text):
    with pytest.raises(ConfigError):
        mjplab.config.loads(text)


@pytest.mark.parametrize(
    ('value', 'expected'),
    [
        ('3', 3),
        ('1', 1),
    ]
)
def test_thread_count_from_environment(value, expected):
    try:
        os.environ[mjplab.config.THREADS_ENV] = value
        assert mjplab.config.thread_count() == expected
    finally:
        del os.environ[mjplab.config.THREADS_ENV]


@pytest.mark.parametrize('value', ['zero', '0', '-2'])
def test_thread_count_invalid(value):
    try:
        os.environ[mjplab.config.THREADS_ENV] = value
        with pytest.raises(ConfigError):
            mjplab.config.thread_count()
    finally:
        del os.environ[mjplab.config.THREADS_ENV]


def test_thread_count_default():
    saved = os.environ.pop(mjplab.config.THREADS_ENV, None)
    try:
        assert mjplab.config.thread_count() >= 1
    finally:
        if saved is not None:
            os.environ[mjplab.config.THREADS_ENV] = saved
