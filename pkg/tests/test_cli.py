import json
import os
import tempfile
import unittest.mock as mock

import numpy as np
import pytest

import mjplab.cli
import mjplab.config
import mjplab.readwrite
import mjplab.vi
from mjplab.core import TimeSeries
from mjplab.errors import DataError

TINY_DFR_TOML = """
[model]
k = 6
hidden = 4
ode_hidden = [4]
psi_hidden = [4]
lambda_hidden = [4]
posterior = "masked"

[train]
epochs = 2
batch_size = 2
quadrature_points = 5
cov_freeze_steps = 0
seq_anneal_steps = 0
seq_anneal_growth = 0

[prior]
structure = "dfr"
noise_dim = 3
hidden = [4]

[emission]
kind = "categorical"

[predict]
samples = 4
prior_samples = 4
"""


def run(argv):
    """Run the CLI with ``--threads 1``, restoring the environment it changes."""
    saved = os.environ.get(mjplab.config.THREADS_ENV)
    try:
        return mjplab.cli.main(list(argv) + ['--threads', '1'])
    finally:
        if saved is None:
            os.environ.pop(mjplab.config.THREADS_ENV, None)
        else:
            os.environ[mjplab.config.THREADS_ENV] = saved


def count_lines(path):
    with open(path) as fin:
        return sum(1 for line in fin if line.strip())


@pytest.mark.parametrize(('path', 'expected'), [
    ('data.jsonl', 'data.meta.json'),
    ('out/data.jsonl.gz', 'out/data.meta.json'),
    ('data.json', 'data.meta.json'),
    ('recording.csv', 'recording.csv.meta.json'),
])
def test_meta_path(path, expected):
    assert mjplab.cli.meta_path(path) == expected


@pytest.mark.parametrize(('path', 'expected'), [
    ('data.jsonl', 'data.train.jsonl'),
    ('out/data.jsonl.gz', 'out/data.train.jsonl.gz'),
    ('data.csv', 'data.csv.train'),
])
def test_split_path(path, expected):
    assert mjplab.cli.split_path(path, 'train') == expected


def test_loss_path():
    assert mjplab.cli.loss_path('model.ckpt.json') == 'model.ckpt.loss.csv'


def test_future_times():
    series = TimeSeries([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
    assert np.allclose(mjplab.cli.future_times(series, 1.0, 3), [2.0, 2.5, 3.0])
    assert np.allclose(mjplab.cli.future_times(series, 0.0, 3), [2.0])


def test_pair_splits():
    a = TimeSeries([0.0], [1.0], meta={'split': 'observed', 'index': 0})
    b = TimeSeries([0.0], [1.0], meta={'split': 'observed', 'index': 1})
    fa = TimeSeries([1.0], [1.0], meta={'split': 'future', 'index': 0})
    fb = TimeSeries([1.0], [1.0], meta={'split': 'future', 'index': 1})

    observed, future = mjplab.cli.pair_splits([fb, a, fa, b])
    assert observed == [a, b]
    assert future == [fa, fb]

    observed, future = mjplab.cli.pair_splits([a, b])
    assert future is None

    with pytest.raises(DataError):
        mjplab.cli.pair_splits([a, b, fa])


def write_semicolon_recording(path):
    with open(path, 'w') as fout:
        fout.write('cell;time;v0\na;0.0;0.1\na;0.5;1.2\nb;0.0;0.3\nb;0.7;0.9\nb;1.1;1.4\n')


def test_load_series_uses_data_section():
    config = mjplab.config.loads('[data]\ncsv_time_col = "time"\ncsv_delimiter = ";"\n')
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'recording.csv')
        write_semicolon_recording(path)
        args = mjplab.cli.make_parser().parse_args(
            ['evaluate', '--ckpt', 'm.json', '--data', path, '--csv-series-col', 'cell'])
        series = mjplab.cli._load_series(args, config)
    assert [len(s) for s in series] == [2, 3]
    assert np.allclose(series[1].times, [0.0, 0.7, 1.1])


def test_load_series_command_line_overrides_data_section():
    config = mjplab.config.loads('[data]\ncsv_time_col = "t"\n')
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'recording.csv')
        write_semicolon_recording(path)
        args = mjplab.cli.make_parser().parse_args(
            ['evaluate', '--ckpt', 'm.json', '--data', path, '--csv-series-col', 'cell',
             '--csv-time-col', 'time', '--fmtparams', 'delimiter=;'])
        series = mjplab.cli._load_series(args, config)
    assert [len(s) for s in series] == [2, 3]


def test_rates_from_file():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'rates.json')
        mjplab.readwrite.write_json(path, {'k': 2, 'rates': [1.0, 2.0]})
        f = mjplab.cli.rates_from_file(path)
        assert np.allclose(f.entries, [[-1.0, 1.0], [2.0, -2.0]])

        mjplab.readwrite.write_json(
            path, {'process': 'dfr', 'params': {'v': 1.0, 'r': 1.0, 'b': 1.0}})
        assert mjplab.cli.rates_from_file(path).k == 6

        for bad in ([1, 2], {'rates': [1.0]}, {'process': 'unknown'}):
            mjplab.readwrite.write_json(path, bad)
            with pytest.raises(DataError):
                mjplab.cli.rates_from_file(path)


def test_analyze_rates_file():
    with tempfile.TemporaryDirectory() as tmpdir:
        rates = os.path.join(tmpdir, 'rates.json')
        out = os.path.join(tmpdir, 'report.json')
        mjplab.readwrite.write_json(rates, {'k': 2, 'rates': [1.0, 2.0]})
        assert run(['analyze', '--rates-file', rates, '--out', out]) == 0
        report = mjplab.readwrite.read_json(out)
    assert np.allclose(report['stationary'], [2 / 3, 1 / 3])
    assert np.allclose(report['timescales'], [1 / 3])


def test_analyze_to_stdout(capsys):
    with tempfile.TemporaryDirectory() as tmpdir:
        rates = os.path.join(tmpdir, 'rates.json')
        mjplab.readwrite.write_json(rates, {'k': 2, 'rates': [1.0, 1.0]})
        assert run(['analyze', '--rates-file', rates]) == 0
    report = json.loads(capsys.readouterr().out)
    assert np.allclose(report['stationary'], [0.5, 0.5])


def test_exit_code_numeric():
    with tempfile.TemporaryDirectory() as tmpdir:
        rates = os.path.join(tmpdir, 'rates.json')
        mjplab.readwrite.write_json(rates, {'k': 2, 'rates': [1.0, 0.0]})
        assert run(['analyze', '--rates-file', rates]) == mjplab.cli.EXIT_NUMERIC


@pytest.mark.parametrize(('argv'), [
    ['train', '--data', 'does-not-exist.jsonl', '--out', 'model.json'],
    ['generate', '--process', 'dfr', '--single', '--out', 'dfr.jsonl'],
    ['analyze', '--rates-file', 'does-not-exist.json'],
])
def test_exit_code_data(argv):
    with tempfile.TemporaryDirectory() as tmpdir:
        argv = [os.path.join(tmpdir, a) if a.endswith(('.json', '.jsonl')) else a for a in argv]
        assert run(argv) == mjplab.cli.EXIT_DATA


def test_exit_code_bad_config():
    with tempfile.TemporaryDirectory() as tmpdir:
        config = os.path.join(tmpdir, 'bad.toml')
        data = os.path.join(tmpdir, 'data.jsonl')
        with open(config, 'w') as fout:
            fout.write('[model]\nk = "six"\n')
        mjplab.readwrite.write_dataset(data, [TimeSeries([0.0, 1.0], [0.0, 1.0])])
        argv = ['train', '--config', config, '--data', data,
                '--out', os.path.join(tmpdir, 'm.json')]
        assert run(argv) == mjplab.cli.EXIT_DATA


def test_exit_code_incomplete_manifest():
    with tempfile.TemporaryDirectory() as tmpdir:
        ckpt = os.path.join(tmpdir, 'm.ckpt.json')
        mjplab.readwrite.write_json(
            ckpt, {'schema_version': mjplab.readwrite.SCHEMA_VERSION, 'parameters': []})
        with open(mjplab.readwrite.blob_path(ckpt), 'wb'):
            pass
        argv = ['analyze', '--ckpt', ckpt]
        assert run(argv) == mjplab.cli.EXIT_DATA


@mock.patch('mjplab.vi.train', side_effect=AssertionError('negative KL -0.25'))
def test_exit_code_failed_training_check(train, caplog):
    with tempfile.TemporaryDirectory() as tmpdir:
        data = os.path.join(tmpdir, 'dfr.jsonl')
        config = os.path.join(tmpdir, 'dfr.toml')
        with open(config, 'w') as fout:
            fout.write(TINY_DFR_TOML)
        assert run(['generate', '--process', 'dfr', '--n', '2', '--obs', '5', '--out', data]) == 0
        argv = ['train', '--config', config, '--data', data,
                '--out', os.path.join(tmpdir, 'm.ckpt.json')]
        assert run(argv) == mjplab.cli.EXIT_NUMERIC
    assert train.called
    assert 'negative KL' in caplog.text


@pytest.mark.parametrize(('argv'), [
    ['analyze'],
    ['analyze', '--ckpt', 'a.json', '--rates-file', 'b.json'],
    ['predict', '--ckpt', 'a.json', '--data', 'd.jsonl', '--out', 'p.csv', '--steps', '0'],
    ['generate', '--process', 'nope', '--out', 'x.jsonl'],
    ['analyze', '--rates-file', 'b.json', '--threads', '0'],
])
def test_exit_code_usage(argv):
    with pytest.raises(SystemExit) as err:
        mjplab.cli.main(argv)
    assert err.value.code == mjplab.cli.EXIT_USAGE


def test_generate_split():
    with tempfile.TemporaryDirectory() as tmpdir:
        out = os.path.join(tmpdir, 'dfr.jsonl')
        argv = ['generate', '--process', 'dfr', '--n', '10', '--obs', '3', '--split', '--out', out]
        assert run(argv) == 0
        meta = mjplab.readwrite.read_json(os.path.join(tmpdir, 'dfr.meta.json'))
        sizes = {}
        for part in mjplab.cli.PARTS:
            path = os.path.join(tmpdir, 'dfr.%s.jsonl' % part)
            sizes[part] = len(mjplab.readwrite.read_dataset(path))
    assert meta['process'] == 'dfr'
    assert meta['n'] == 10
    assert meta['parts'] == sizes
    assert sum(sizes.values()) == 10


def test_generate_single_lv():
    with tempfile.TemporaryDirectory() as tmpdir:
        out = os.path.join(tmpdir, 'lv.jsonl')
        assert run(['generate', '--process', 'lv', '--single', '--out', out]) == 0
        series = mjplab.readwrite.read_dataset(out)
        meta = mjplab.readwrite.read_json(mjplab.cli.meta_path(out))
    assert [s.meta['split'] for s in series] == ['observed', 'future']
    assert meta['single'] is True
    observed, future = mjplab.cli.pair_splits(series)
    assert future[0].times[0] > observed[0].times[-1]


def test_pipeline():
    with tempfile.TemporaryDirectory() as tmpdir:
        data = os.path.join(tmpdir, 'dfr.jsonl')
        config = os.path.join(tmpdir, 'dfr.toml')
        ckpt = os.path.join(tmpdir, 'dfr.ckpt.json')
        with open(config, 'w') as fout:
            fout.write(TINY_DFR_TOML)

        argv = ['generate', '--process', 'dfr', '--n', '4', '--obs', '5', '--predict',
                '--seed', '1']
        assert run(argv + ['--out', data]) == 0
        assert mjplab.readwrite.read_json(mjplab.cli.meta_path(data))['predict'] is True
        observed, future = mjplab.cli.pair_splits(mjplab.readwrite.read_dataset(data))
        assert len(observed) == len(future) == 4

        assert run(['train', '--config', config, '--data', data, '--out', ckpt]) == 0
        assert os.path.isfile(mjplab.readwrite.blob_path(ckpt))
        assert count_lines(mjplab.cli.loss_path(ckpt)) == 1 + 2

        assert run(['train', '--resume', ckpt, '--epochs', '3', '--data', data, '--out', ckpt]) == 0
        assert count_lines(mjplab.cli.loss_path(ckpt)) == 1 + 3
        model, state = mjplab.vi.load_model(ckpt)
        assert state.epoch == 3
        assert model.config.train.epochs == 3

        metrics = os.path.join(tmpdir, 'metrics.json')
        assert run(['evaluate', '--ckpt', ckpt, '--data', data, '--out', metrics]) == 0
        report = mjplab.readwrite.read_json(metrics)
        assert {'rmse', 'nll', 'kl', 'prediction'} <= set(report)

        predictions = os.path.join(tmpdir, 'predictions.csv')
        assert run(['predict', '--ckpt', ckpt, '--data', data, '--out', predictions]) == 0
        assert count_lines(predictions) == 1 + sum(len(f) for f in future)
        with open(predictions) as fin:
            header = fin.readline().strip().split(',')
        assert header == ['series', 'time'] + ['v%d' % d for d in range(6)]

        argv = ['predict', '--ckpt', ckpt, '--data', data, '--out', predictions, '--horizon', '0.5',
                '--steps', '3', '--mode', 'gillespie', '--samples', '4']
        assert run(argv) == 0
        assert count_lines(predictions) == 1 + 4 * 3

        summary = os.path.join(tmpdir, 'summary.json')
        assert run(['analyze', '--ckpt', ckpt, '--samples', '20', '--out', summary]) == 0
        report = mjplab.readwrite.read_json(summary)
        assert list(report['parameters']) == ['v', 'r', 'b']
        assert len(report['stationary']) == 6
